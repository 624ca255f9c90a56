//! Run configuration: one TOML document with a table per component.
//!
//! Unknown keys are rejected everywhere. The fingerprint is the SHA-256 of the canonical
//! (sorted-key) JSON rendering of the fully-resolved document, so it ignores key order and
//! formatting but changes with any value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noisestats::CorrelationMode;
use crate::schedule::{Curriculum, EdmCoefficients, SigmaSchedule, TimestepSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub pae: PaeConfig,
    pub pdit: PditConfig,
    pub cm: CmConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            pae: PaeConfig::default(),
            pdit: PditConfig::default(),
            cm: CmConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `clean/` and `noisy/` folders of identically named PNGs.
    pub root: PathBuf,
    pub clean_dir: String,
    pub noisy_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/toy"),
            clean_dir: "clean".into(),
            noisy_dir: "noisy".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Depth-to-space: four channels become one 2×2 block.
    PixelShuffle,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaeConfig {
    /// Trunk widths for scales 0..=3.
    pub trunk: [usize; 4],
    pub c_global: usize,
    pub c_local: usize,
    pub c_z: usize,
    /// Correlation window of the local prompt block.
    pub rho: usize,
    pub corr_mode: CorrelationMode,
    pub upsample: Upsample,
    pub lambda_z: f64,
    pub prompt_init_std: f64,
    /// Training patch size; also the spatial size of the prompt components.
    pub patch: usize,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for PaeConfig {
    fn default() -> Self {
        Self {
            trunk: [64, 128, 256, 256],
            c_global: 32,
            c_local: 32,
            c_z: 192,
            rho: 7,
            corr_mode: CorrelationMode::ChannelMean,
            upsample: Upsample::PixelShuffle,
            lambda_z: 1e-4,
            prompt_init_std: 0.02,
            patch: 64,
            batch: 8,
            iterations: 2000,
            lr: 1e-4,
            lr_min: 1e-6,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl PaeConfig {
    /// Small CPU preset.
    pub fn desk() -> Self {
        Self {
            trunk: [16, 32, 64, 192],
            c_global: 8,
            c_local: 8,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.contains(&0) || self.c_global == 0 || self.c_local == 0 || self.c_z == 0 {
            return Err(Error::Config("pae channel counts must be positive".into()));
        }
        if self.patch == 0 || self.patch % 8 != 0 {
            return Err(Error::Config(format!("pae patch {} must be a positive multiple of 8", self.patch)));
        }
        if self.rho % 2 == 0 || self.rho < 3 || self.rho > self.patch {
            return Err(Error::Config(format!("pae rho {} must be odd and in 3..=patch", self.rho)));
        }
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::Config("pae batch and iterations must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("pae needs 0 <= lr_min <= lr, lr > 0".into()));
        }
        if self.lambda_z < 0.0 {
            return Err(Error::Config("lambda_z must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PditConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub token_patch: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Std of the noise added to the conditioning clean image during training.
    pub cond_noise_std: f64,
    /// Average-pool factor applied to the conditioning clean image before pixel-downsampling.
    pub cond_downsample: usize,
    /// Channels of each per-source conditioning convolution.
    pub cond_channels: usize,
}

impl Default for PditConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            hidden_dim: 384,
            num_heads: 6,
            token_patch: 1,
            mlp_ratio: 4,
            dropout: 0.1,
            cond_noise_std: 0.05,
            cond_downsample: 2,
            cond_channels: 32,
        }
    }
}

impl PditConfig {
    pub fn desk() -> Self {
        Self {
            num_blocks: 4,
            hidden_dim: 128,
            num_heads: 4,
            cond_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("pdit sizes must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even for the sinusoidal embedding".into()));
        }
        if self.token_patch == 0 {
            return Err(Error::Config("token_patch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.cond_noise_std < 0.0 {
            return Err(Error::Config("cond_noise_std must be >= 0".into()));
        }
        if self.cond_downsample == 0 || 8 % self.cond_downsample != 0 {
            return Err(Error::Config("cond_downsample must divide 8".into()));
        }
        if self.cond_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("cond_channels and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub tau: f64,
    pub s0: usize,
    pub s1: usize,
    /// Total iterations `K` (also the curriculum horizon).
    pub iterations: usize,
    /// Floor `k/K'` in the curriculum exponent.
    pub stair_curriculum: bool,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub batch: usize,
    pub grad_clip: f64,
    pub stats_batches: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for CmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            tau: 7.0,
            s0: 10,
            s1: 160,
            iterations: 5000,
            stair_curriculum: false,
            p_mean: -1.1,
            p_std: 2.0,
            sigma_data: 0.5,
            ema_decay: 0.9999,
            lr: 2e-4,
            batch: 16,
            grad_clip: 1.0,
            stats_batches: 100,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl CmConfig {
    pub fn desk() -> Self {
        Self {
            ema_decay: 0.999,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.sigma_min, self.sigma_max, self.tau)
    }

    pub fn curriculum(&self) -> Result<Curriculum> {
        let mut c = Curriculum::new(self.s0, self.s1, self.iterations)?;
        c.stair = self.stair_curriculum;
        Ok(c)
    }

    pub fn sampler(&self) -> TimestepSampler {
        TimestepSampler {
            p_mean: self.p_mean,
            p_std: self.p_std,
        }
    }

    pub fn edm(&self) -> EdmCoefficients {
        EdmCoefficients {
            sigma_data: self.sigma_data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.curriculum()?;
        if !(self.p_std > 0.0) || !(self.sigma_data > 0.0) {
            return Err(Error::Config("p_std and sigma_data must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.stats_batches == 0 {
            return Err(Error::Config("cm lr, batch and stats_batches must be positive".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0 (0 disables)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub width: usize,
    pub patch: usize,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Probability that a batch is drawn from the synthetic pairs.
    pub mix_ratio: f64,
    pub log_every: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 32,
            patch: 48,
            batch: 8,
            iterations: 2000,
            lr: 1e-3,
            lr_min: 1e-5,
            mix_ratio: 0.0,
            log_every: 50,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!("denoiser depth {} must be >= 3", self.depth)));
        }
        if self.width == 0 || self.patch == 0 || self.batch == 0 || self.iterations == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio {} outside [0, 1]", self.mix_ratio)));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("denoiser needs 0 <= lr_min <= lr, lr > 0".into()));
        }
        Ok(())
    }
}

/// SHA-256 (hex) of a value's canonical JSON rendering.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    // serde_json's default map is a BTreeMap, so object keys serialize sorted.
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("config values are always serializable");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl RunConfig {
    /// The small-CPU preset used by the examples and acceptance runs.
    pub fn desk() -> Self {
        Self {
            pae: PaeConfig::desk(),
            pdit: PditConfig::desk(),
            cm: CmConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config values are always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.pae.validate()?;
        self.pdit.validate()?;
        self.cm.validate()?;
        self.denoiser.validate()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::desk();
        let back = RunConfig::from_toml_str(&c.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml_str("seed = 1\nbogus = 2\n", Path::new("x"));
        assert!(matches!(e, Err(Error::Parse { .. })));
        let e = RunConfig::from_toml_str("[pae]\nc_zz = 2\n", Path::new("x"));
        assert!(matches!(e, Err(Error::Parse { .. })));
    }

    #[test]
    fn fingerprint_ignores_order_tracks_values() {
        let a = RunConfig::from_toml_str("seed = 3\n[cm]\ns0 = 10\ns1 = 160\n", Path::new("a")).unwrap();
        let b = RunConfig::from_toml_str("[cm]\ns1 = 160\ns0 = 10\n\n", Path::new("b")).unwrap();
        let b = RunConfig { seed: 3, ..b };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig::from_toml_str("seed = 3\n[cm]\ns0 = 10\ns1 = 161\n", Path::new("c")).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::desk();
        c.pdit.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::desk();
        c.cm.s1 = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::desk();
        c.pae.patch = 60;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.denoiser.depth = 2;
        assert!(c.validate().is_err());
    }
}
