//! Prompt autoencoder: a prompt encoder mapping noise residuals to latent codes and prompt
//! features, and a clean-image-conditioned decoder mapping latents back to noisy images.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use noiseprompt_core::config::{PaeConfig, RunConfig, Upsample};
use noiseprompt_core::data::PairedDataset;
use noiseprompt_core::noisestats::{local_correlation_map, rowcol_average, CorrelationMode};
use noiseprompt_core::Image;

use crate::checkpoint::{Checkpoint, Expect};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear, ResBlock};
use crate::ops::{
    images_from_nhwc, nhwc_from_images, pixel_shuffle, pixel_unshuffle, resample_bilinear,
    softmax_last, upsample_nearest2,
};
use crate::optim::{collect_grads, cosine_lr, Adam};
use crate::params::{Init, ParamStore};
use crate::train::{due, ensure_finite, prefetch, scalar, LogSink};

/// Number of stride-2 stages; latents are `H/8 × W/8`.
pub const STAGES: usize = 3;
pub const SCALES: usize = STAGES + 1;
const MOMENT_EPS: f64 = 1e-5;

/// Prompt features produced alongside the latent.
#[derive(Debug, Clone)]
pub struct PromptFeatures {
    /// `F_Global^ℓ`, `B × H/2^ℓ × W/2^ℓ × C_Global` for ℓ = 0..=3.
    pub global: Vec<Tensor>,
    /// `F_Local`, `B × H × W × C_Local`.
    pub local: Tensor,
}

impl PromptFeatures {
    pub fn detach(&self) -> Self {
        Self {
            global: self.global.iter().map(|t| t.detach()).collect(),
            local: self.local.detach(),
        }
    }

    /// Selects batch rows.
    pub fn index(&self, ids: &Tensor) -> Result<Self> {
        Ok(Self {
            global: self.global.iter().map(|t| t.index_select(ids, 0)).collect::<candle_core::Result<_>>()?,
            local: self.local.index_select(ids, 0)?,
        })
    }

    pub fn cat(parts: &[PromptFeatures]) -> Result<Self> {
        let global = (0..SCALES)
            .map(|l| Tensor::cat(&parts.iter().map(|p| &p.global[l]).collect::<Vec<_>>(), 0))
            .collect::<candle_core::Result<_>>()?;
        let local = Tensor::cat(&parts.iter().map(|p| &p.local).collect::<Vec<_>>(), 0)?;
        Ok(Self { global, local })
    }
}

/// Global prompt block: channel moments → softmax weights over learnable prompt components.
#[derive(Debug, Clone)]
pub struct Gpb {
    pub proj: Linear,
    /// `P_Global^ℓ`, `h × w × C_Global` at the training patch scale.
    pub prompt: Tensor,
    pub conv: Conv2d,
}

impl Gpb {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_g: usize, h: usize, w: usize, init_std: f64) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), 2 * c_in, c_g)?,
            prompt: ps.get_or_init(&format!("{name}.prompt"), (h, w, c_g), Init::Normal(init_std))?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_g, c_g, 3)?,
        })
    }

    /// `w = softmax(proj([μ, σ]))`, shape `B × C_Global`.
    pub fn weights(&self, f_in: &Tensor) -> Result<Tensor> {
        let (b, _, _, c) = f_in.dims4()?;
        let mean = f_in.mean_keepdim(1)?.mean_keepdim(2)?;
        let var = f_in.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?.mean_keepdim(2)?;
        let std = (var + MOMENT_EPS)?.sqrt()?;
        let stats = Tensor::cat(&[mean.reshape((b, c))?, std.reshape((b, c))?], 1)?;
        Ok(softmax_last(&self.proj.forward(&stats)?)?)
    }

    /// Returns `(F_Global, w)`.
    pub fn forward(&self, f_in: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, _) = f_in.dims4()?;
        let weights = self.weights(f_in)?;
        let c_g = weights.dim(1)?;
        let p = resample_bilinear(&self.prompt, h, w)?.unsqueeze(0)?;
        let modulated = p.broadcast_mul(&weights.reshape((b, 1, 1, c_g))?)?;
        Ok((self.conv.forward(&modulated)?, weights))
    }
}

/// Local prompt block: local correlation statistics → per-pixel softmax weights.
#[derive(Debug, Clone)]
pub struct Lpb {
    pub rho: usize,
    pub mode: CorrelationMode,
    pub comb_in: Conv2d,
    pub comb_out: Conv2d,
    /// `P_Local`, `H × W × C_Local`.
    pub prompt: Tensor,
    pub conv: Conv2d,
}

impl Lpb {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        rho: usize,
        mode: CorrelationMode,
        c_l: usize,
        h: usize,
        w: usize,
        init_std: f64,
    ) -> Result<Self> {
        Ok(Self {
            rho,
            mode,
            comb_in: Conv2d::new(ps, &format!("{name}.comb_in"), 2 * rho, c_l, 1)?,
            comb_out: Conv2d::new(ps, &format!("{name}.comb_out"), c_l, c_l, 3)?,
            prompt: ps.get_or_init(&format!("{name}.prompt"), (h, w, c_l), Init::Normal(init_std))?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_l, c_l, 3)?,
        })
    }

    /// Row/column-averaged correlation maps of each residual, `B × H × W × 2ρ` (no gradient).
    pub fn correlation_features(&self, residual: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = residual.dims4()?;
        let mut data = Vec::with_capacity(b * h * w * 2 * self.rho);
        for img in images_from_nhwc(residual)? {
            let cm = local_correlation_map(&img, self.rho, self.mode)?;
            data.extend(rowcol_average(&cm));
        }
        Ok(Tensor::from_vec(data, (b, h, w, 2 * self.rho), residual.device())?.to_dtype(residual.dtype())?)
    }

    /// `w_Local`, `B × H × W × C_Local`, softmax over channels.
    pub fn weights(&self, residual: &Tensor) -> Result<Tensor> {
        let feats = self.correlation_features(residual)?;
        let m = self.comb_out.forward(&self.comb_in.forward(&feats)?)?;
        Ok(softmax_last(&m)?)
    }

    /// Returns `(F_Local, w_Local)`.
    pub fn forward(&self, residual: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, h, w, _) = residual.dims4()?;
        let weights = self.weights(residual)?;
        let p = resample_bilinear(&self.prompt, h, w)?.unsqueeze(0)?;
        Ok((self.conv.forward(&weights.broadcast_mul(&p)?)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: Conv2d,
    pub gpb: Vec<Gpb>,
    pub lpb: Lpb,
    pub fuse: Vec<Conv2d>,
    pub blocks: Vec<ResBlock>,
    pub down: Vec<Conv2d>,
    pub out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub upsample: Upsample,
    pub input: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub up: Vec<Conv2d>,
    pub out: Conv2d,
}

/// The full autoencoder and its parameters.
#[derive(Debug, Clone)]
pub struct Pae {
    pub cfg: PaeConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::config(format!("spatial dims {h}x{w} must be positive multiples of 8")));
    }
    Ok(())
}

impl Pae {
    pub fn new(cfg: &PaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.trunk;
        if cfg.upsample == Upsample::PixelShuffle && c[1..].iter().any(|v| v % 4 != 0) {
            return Err(Error::config(format!(
                "pixel-shuffle upsampling needs trunk widths 1..=3 divisible by 4, got {c:?}"
            )));
        }
        let mut ps = ParamStore::new(seed, dtype);
        let p = cfg.patch;
        let std = cfg.prompt_init_std;
        let gpb = (0..SCALES)
            .map(|l| Gpb::new(&mut ps, &format!("enc.gpb{l}"), c[l], cfg.c_global, p >> l, p >> l, std))
            .collect::<Result<Vec<_>>>()?;
        let lpb = Lpb::new(&mut ps, "enc.lpb", cfg.rho, cfg.corr_mode, cfg.c_local, p, p, std)?;
        let fuse = (0..SCALES)
            .map(|l| {
                let extra = cfg.c_global + if l == 0 { cfg.c_local } else { 0 };
                Conv2d::zeros(&mut ps, &format!("enc.fuse{l}"), c[l] + extra, c[l], 3)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let enc_blocks = (0..SCALES)
            .map(|l| ResBlock::new(&mut ps, &format!("enc.block{l}"), c[l]))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let down = (0..STAGES)
            .map(|l| Conv2d::new(&mut ps, &format!("enc.down{l}"), 4 * c[l], c[l + 1], 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let encoder = Encoder {
            stem: Conv2d::new(&mut ps, "enc.stem", 3, c[0], 3)?,
            gpb,
            lpb,
            fuse,
            blocks: enc_blocks,
            down,
            out: Conv2d::new(&mut ps, "enc.out", c[3], cfg.c_z, 1)?,
        };
        let dec_blocks = (0..SCALES)
            .map(|l| ResBlock::new(&mut ps, &format!("dec.block{l}"), c[l]))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let up = (0..STAGES)
            .map(|l| {
                let from = match cfg.upsample {
                    Upsample::PixelShuffle => c[l + 1] / 4,
                    Upsample::Nearest => c[l + 1],
                };
                Conv2d::new(&mut ps, &format!("dec.up{l}"), from + 3 * (1 << (2 * l)), c[l], 3)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let decoder = Decoder {
            upsample: cfg.upsample,
            input: Conv2d::new(&mut ps, "dec.input", cfg.c_z + 3 * 64, c[3], 3)?,
            blocks: dec_blocks,
            up,
            out: Conv2d::zeros(&mut ps, "dec.out", c[0], 3, 3)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            encoder,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Encodes `B × H × W × 3` residuals into latents `B × H/8 × W/8 × C_z` and prompt features.
    pub fn encode(&self, residual: &Tensor) -> Result<(Tensor, PromptFeatures)> {
        let (_, h, w, c) = residual.dims4()?;
        if c != 3 {
            return Err(Error::contract(format!("residual must have 3 channels, got {c}")));
        }
        check_divisible(h, w)?;
        let e = &self.encoder;
        let (local, _) = e.lpb.forward(residual)?;
        let mut x = e.stem.forward(residual)?;
        let mut global = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            let (g, _) = e.gpb[l].forward(&x)?;
            let mut parts = vec![x.clone(), g.clone()];
            if l == 0 {
                parts.push(local.clone());
            }
            x = (&x + e.fuse[l].forward(&Tensor::cat(&parts, D::Minus1)?)?)?;
            x = e.blocks[l].forward(&x)?;
            global.push(g);
            if l < STAGES {
                x = e.down[l].forward(&pixel_unshuffle(&x, 2)?)?;
            }
        }
        Ok((e.out.forward(&x)?, PromptFeatures { global, local }))
    }

    /// Decodes latents conditioned on the clean image; returns the (unclamped) noisy image.
    pub fn decode(&self, z: &Tensor, clean: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = clean.dims4()?;
        let (bz, hz, wz, cz) = z.dims4()?;
        if c != 3 || bz != b || hz * 8 != h || wz * 8 != w || cz != self.cfg.c_z {
            return Err(Error::contract(format!(
                "decode: latent {:?} incompatible with clean {:?}",
                z.dims(),
                clean.dims()
            )));
        }
        let d = &self.decoder;
        let mut x = d.input.forward(&Tensor::cat(&[z, &pixel_unshuffle(clean, 8)?], D::Minus1)?)?;
        x = d.blocks[STAGES].forward(&x)?;
        for l in (0..STAGES).rev() {
            x = match d.upsample {
                Upsample::PixelShuffle => pixel_shuffle(&x, 2)?,
                Upsample::Nearest => upsample_nearest2(&x)?,
            };
            let cond = pixel_unshuffle(clean, 1 << l)?;
            x = d.up[l].forward(&Tensor::cat(&[&x, &cond], D::Minus1)?)?;
            x = d.blocks[l].forward(&x)?;
        }
        Ok((clean + d.out.forward(&x.silu()?)?)?)
    }

    /// `decode(encode(noisy − clean), clean)` plus the latent.
    pub fn reconstruct(&self, clean: &Tensor, noisy: &Tensor) -> Result<(Tensor, Tensor)> {
        let (z, _) = self.encode(&(noisy - clean)?)?;
        let recon = self.decode(&z, clean)?;
        Ok((recon, z))
    }

    /// Inference-mode reconstruction of image pairs, clamped to `[0, 1]`.
    pub fn reconstruct_images(&self, clean: &[Image], noisy: &[Image]) -> Result<Vec<Image>> {
        let c = nhwc_from_images(clean, self.dtype(), self.device())?;
        let n = nhwc_from_images(noisy, self.dtype(), self.device())?;
        let (recon, _) = self.reconstruct(&c, &n)?;
        Ok(images_from_nhwc(&recon.clamp(0.0, 1.0)?)?)
    }
}

/// `mean|recon − noisy| + λ_z · mean(z²)`.
pub fn pae_loss(recon: &Tensor, noisy: &Tensor, z: &Tensor, lambda_z: f64) -> Result<Tensor> {
    if recon.dims() != noisy.dims() {
        return Err(Error::contract(format!(
            "pae_loss: recon {:?} vs noisy {:?}",
            recon.dims(),
            noisy.dims()
        )));
    }
    let l1 = (recon - noisy)?.abs()?.mean_all()?;
    let reg = z.sqr()?.mean_all()?;
    Ok((l1 + (reg * lambda_z)?)?)
}

pub const CHECKPOINT_KIND: &str = "pae";

/// Fingerprint identifying the PAE part of a run configuration.
pub fn fingerprint(cfg: &PaeConfig) -> String {
    noiseprompt_core::config::fingerprint_of(cfg)
}

impl Pae {
    /// Rebuilds a model from a `pae` checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::config(format!("expected a {CHECKPOINT_KIND} checkpoint, got {}", ckpt.kind)));
        }
        let pae = Pae::new(&ckpt.config.pae, ckpt.config.seed, DType::F32)?;
        pae.params.load(&ckpt.tensors)?;
        Ok(pae)
    }

    pub fn load(dir: &Path, expect_fingerprint: Option<&str>, allow_mismatch: bool) -> Result<Self> {
        let ckpt = Checkpoint::load(
            dir,
            &Expect {
                kind: Some(CHECKPOINT_KIND),
                fingerprint: expect_fingerprint,
                allow_mismatch,
            },
        )?;
        Self::from_checkpoint(&ckpt)
    }

    pub fn to_checkpoint(&self, run: &RunConfig, iteration: usize, losses: Vec<(usize, f64)>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            fingerprint: fingerprint(&self.cfg),
            iteration,
            tensors: self.params.snapshot()?,
            meta: serde_json::Value::Null,
            config: run.clone(),
            losses,
        })
    }
}

/// Trains a PAE on random aligned patches of `dataset` with Adam and a cosine-annealed learning
/// rate. Periodic checkpoints go to `out/iter-{k}`, the final one to `out/final`.
pub fn train_pae(dataset: &PairedDataset, run: &RunConfig, out: Option<&Path>, log: LogSink) -> Result<Checkpoint> {
    run.validate()?;
    let cfg = &run.pae;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let pae = Pae::new(cfg, run.seed, DType::F32)?;
    let mut opt = Adam::adam();
    let mut losses = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let (dtype, dev) = (pae.dtype(), pae.device().clone());
    prefetch(
        cfg.iterations,
        2,
        |k| {
            let b = dataset.sample_patch_batch(cfg.batch, cfg.patch, k as u64)?;
            Ok((nhwc_from_images(&b.clean, dtype, &dev)?, nhwc_from_images(&b.noisy, dtype, &dev)?))
        },
        |k, (clean, noisy)| {
            let lr = cosine_lr(k, cfg.iterations, cfg.lr, cfg.lr_min);
            let (recon, z) = pae.reconstruct(&clean, &noisy)?;
            let loss = pae_loss(&recon, &noisy, &z, cfg.lambda_z)?;
            let value = scalar(&loss)?;
            ensure_finite(value, k, last_good.as_deref())?;
            let grads = collect_grads(&pae.params, &loss.backward()?);
            opt.step(&pae.params, &grads, lr)?;
            losses.push((k, value));
            if due(k, cfg.iterations, cfg.log_every) {
                log(&serde_json::json!({"stage": "pae", "iteration": k, "loss": value, "lr": lr}));
            }
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0 && k + 1 < cfg.iterations {
                    let path = dir.join(format!("iter-{}", k + 1));
                    pae.to_checkpoint(run, k + 1, losses.clone())?.save(&path)?;
                    last_good = Some(path);
                }
            }
            Ok(())
        },
    )?;
    let ckpt = pae.to_checkpoint(run, cfg.iterations, losses)?;
    if let Some(dir) = out {
        ckpt.save(&dir.join("final"))?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, randomize};

    fn tiny_cfg() -> PaeConfig {
        PaeConfig {
            trunk: [4, 8, 8, 8],
            c_global: 3,
            c_local: 3,
            c_z: 2,
            rho: 3,
            patch: 16,
            ..PaeConfig::default()
        }
    }

    fn noise(seed: u64, shape: (usize, usize, usize, usize), scale: f64, dtype: DType) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v = noiseprompt_core::rng::normal_vec_f64(&mut noiseprompt_core::rng::stream(seed, "test-pae", 0), n);
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().affine(scale, 0.0).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn shapes_follow_the_contract() {
        let pae = Pae::new(&tiny_cfg(), 1, DType::F32).unwrap();
        for (h, w) in [(16, 16), (24, 32), (64, 64)] {
            let r = noise(2, (2, h, w, 3), 0.05, DType::F32);
            let (z, f) = pae.encode(&r).unwrap();
            assert_eq!(z.dims(), &[2, h / 8, w / 8, 2]);
            assert_eq!(f.local.dims(), &[2, h, w, 3]);
            for (l, g) in f.global.iter().enumerate() {
                assert_eq!(g.dims(), &[2, h >> l, w >> l, 3]);
            }
            let clean = (noise(3, (2, h, w, 3), 0.1, DType::F32) + 0.5).unwrap();
            assert_eq!(pae.decode(&z, &clean).unwrap().dims(), clean.dims());
        }
        let bad = noise(2, (1, 12, 16, 3), 0.05, DType::F32);
        assert!(pae.encode(&bad).unwrap_err().is_config());
    }

    #[test]
    fn encode_is_deterministic() {
        let pae = Pae::new(&tiny_cfg(), 1, DType::F32).unwrap();
        let r = noise(4, (1, 16, 16, 3), 0.05, DType::F32);
        let a = pae.encode(&r).unwrap().0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = pae.encode(&r).unwrap().0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_depends_on_clean() {
        let pae = Pae::new(&tiny_cfg(), 1, DType::F64).unwrap();
        randomize(&pae.params, 5, 0.3).unwrap();
        let z = noise(6, (1, 2, 2, 2), 1.0, DType::F64);
        let c1 = (noise(7, (1, 16, 16, 3), 0.1, DType::F64) + 0.5).unwrap();
        let c2 = (noise(8, (1, 16, 16, 3), 0.1, DType::F64) + 0.5).unwrap();
        let d = (pae.decode(&z, &c1).unwrap() - pae.decode(&z, &c2).unwrap()).unwrap();
        assert!(d.abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
        let wrong = noise(6, (1, 3, 2, 2), 1.0, DType::F64);
        assert!(pae.decode(&wrong, &c1).unwrap_err().is_contract());
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let pae = Pae::new(&tiny_cfg(), 1, DType::F32).unwrap();
        randomize(&pae.params, 9, 0.5).unwrap();
        let r = noise(10, (2, 16, 16, 3), 0.05, DType::F32);
        let f = pae.encoder.stem.forward(&r).unwrap();
        let wg = pae.encoder.gpb[0].weights(&f).unwrap().sum_keepdim(1).unwrap();
        let wl = pae.encoder.lpb.weights(&r).unwrap().sum_keepdim(3).unwrap();
        for s in [wg, wl] {
            let v = s.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-5));
        }
    }

    #[test]
    fn gpb_weights_ignore_spatial_order() {
        let pae = Pae::new(&tiny_cfg(), 1, DType::F64).unwrap();
        randomize(&pae.params, 11, 0.5).unwrap();
        let f = noise(12, (1, 4, 4, 8), 1.0, DType::F64);
        // reverse the 16 spatial positions
        let rev = Tensor::from_vec((0..16u32).rev().collect::<Vec<_>>(), 16, &Device::Cpu).unwrap();
        let perm = f.reshape((16, 8)).unwrap().index_select(&rev, 0).unwrap().reshape((1, 4, 4, 8)).unwrap();
        let gpb = &pae.encoder.gpb[1];
        let a = gpb.weights(&f).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = gpb.weights(&perm).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn constant_residual_gives_uniform_local_weights() {
        let pae = Pae::new(&tiny_cfg(), 1, DType::F64).unwrap();
        randomize(&pae.params, 13, 0.5).unwrap();
        let r = Tensor::full(0.2f64, (1, 16, 16, 3), &Device::Cpu).unwrap();
        let w = pae.encoder.lpb.weights(&r).unwrap();
        let v = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // interior pixels all see the same zero features; borders see zero padding in the 3x3 conv
        let at = |y: usize, x: usize| &v[(y * 16 + x) * 3..(y * 16 + x + 1) * 3];
        for y in 1..15 {
            for x in 1..15 {
                assert_eq!(at(y, x), at(1, 1));
            }
        }
    }

    #[test]
    fn pae_loss_examples() {
        let dev = Device::Cpu;
        let noisy = Tensor::full(0.4f64, (1, 8, 8, 3), &dev).unwrap();
        let z0 = Tensor::zeros((1, 1, 1, 2), DType::F64, &dev).unwrap();
        let z1 = Tensor::ones((1, 1, 1, 2), DType::F64, &dev).unwrap();
        let s = |t: Tensor| t.to_scalar::<f64>().unwrap();
        assert_eq!(s(pae_loss(&noisy, &noisy, &z0, 1e-4).unwrap()), 0.0);
        let shifted = (&noisy + 0.1).unwrap();
        assert!((s(pae_loss(&shifted, &noisy, &z0, 1e-4).unwrap()) - 0.1).abs() < 1e-12);
        assert_eq!(s(pae_loss(&noisy, &noisy, &z1, 1.0).unwrap()), 1.0);
        assert!(pae_loss(&noisy, &z0, &z0, 1.0).unwrap_err().is_contract());
    }

    #[test]
    fn gpb_gradients_match_finite_differences() {
        let pae = Pae::new(&tiny_cfg(), 21, DType::F64).unwrap();
        randomize(&pae.params, 22, 0.4).unwrap();
        let f = noise(23, (2, 8, 8, 8), 1.0, DType::F64);
        let probe = noise(24, (2, 8, 8, 3), 1.0, DType::F64);
        let gpb = pae.encoder.gpb[1].clone();
        let report = check_gradients(&pae.params, "enc.gpb1.", 60, 25, || {
            Ok((gpb.forward(&f)?.0 * &probe)?.sum_all()?)
        })
        .unwrap();
        assert!(report.checked >= 50 && report.max_rel_err < 1e-3, "{report:?}");
    }
}
