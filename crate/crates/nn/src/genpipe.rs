//! One-step noise generation (paired and unpaired) and synthetic-dataset emission.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use noiseprompt_core::data::{list_pngs, PairedDataset};
use noiseprompt_core::{rng, Error as CoreError, Image};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmtrain::TrainedPdit;
use crate::error::{Error, Result};
use crate::ops::{images_from_nhwc, nhwc_from_images};
use crate::pae::{self, Pae};

pub const MANIFEST: &str = "manifest.jsonl";

/// Residual patches from which unpaired generation draws its prompts.
#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    /// `(source id, residual)`.
    pub entries: Vec<(String, Image)>,
}

impl NoiseBank {
    pub fn from_dataset(ds: &PairedDataset) -> Self {
        Self {
            entries: ds.pairs.iter().map(|p| (p.id.clone(), p.residual())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Draws an entry keyed by `seed`.
    pub fn pick(&self, seed: u64) -> Result<&(String, Image)> {
        if self.entries.is_empty() {
            return Err(Error::contract("noise bank is empty"));
        }
        let i = rng::stream(seed, "bank-pick", 0).random_range(0..self.entries.len());
        Ok(&self.entries[i])
    }
}

/// A generated noisy image with its pre-clamp saturation rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub image: Image,
    /// Fraction of values clipped by the final clamp to `[0, 1]`.
    pub saturation: f64,
}

/// Frozen PAE + P-DiT pair.
#[derive(Debug, Clone)]
pub struct Generator {
    pub pae: Pae,
    pub pdit: TrainedPdit,
}

impl Generator {
    /// Pairs the models, refusing a P-DiT trained on a different PAE unless `allow_mismatch`.
    pub fn new(pae: Pae, pdit: TrainedPdit, allow_mismatch: bool) -> Result<Self> {
        let fp = pae::fingerprint(&pae.cfg);
        if pdit.pae_fingerprint != fp && !allow_mismatch {
            return Err(Error::config(format!(
                "P-DiT was trained on PAE {} but the given PAE is {fp}",
                pdit.pae_fingerprint
            )));
        }
        if pdit.model.c_z != pae.cfg.c_z {
            return Err(Error::config("P-DiT and PAE latent widths differ"));
        }
        Ok(Self { pae, pdit })
    }

    pub fn load(pae_dir: &Path, pdit_dir: &Path, allow_mismatch: bool) -> Result<Self> {
        let pdit = TrainedPdit::load(pdit_dir)?;
        let pae = Pae::load(pae_dir, None, false)?;
        Self::new(pae, pdit, allow_mismatch)
    }

    /// Draws `ẑ₀` for a batch: `z_T = σ_max·ε` with one keyed stream per item, one consistency
    /// step, denormalization. Returns the latent in PAE units.
    pub fn sample_latents(&self, clean: &Tensor, residual: &Tensor, seeds: &[u64]) -> Result<Tensor> {
        let (_, prompts) = self.pae.encode(residual)?;
        let (b, h, w, _) = clean.dims4()?;
        let (hz, wz, cz) = (h / 8, w / 8, self.pae.cfg.c_z);
        let m = &self.pdit.model;
        let sigma_max = self.pdit.config.cm.sigma_max;
        let mut eps = Vec::with_capacity(b * hz * wz * cz);
        for s in seeds {
            eps.extend(rng::normal_vec(&mut rng::stream(*s, "gen-z", 0), hz * wz * cz));
        }
        let z_t = (Tensor::from_vec(eps, (b, hz, wz, cz), clean.device())?.to_dtype(clean.dtype())? * sigma_max)?;
        let cond = m.cond_embed(clean, &prompts, None)?;
        let z0 = m.consistency_fn(&z_t, &vec![sigma_max; b], &cond, None)?;
        self.pdit.stats.denormalize(&z0)
    }

    /// Generates one noisy image per `(clean, residual, seed)`; all items must share a shape.
    pub fn generate_batch(&self, clean: &[Image], residuals: &[Image], seeds: &[u64]) -> Result<Vec<Generated>> {
        if clean.len() != residuals.len() || clean.len() != seeds.len() || clean.is_empty() {
            return Err(Error::contract("generate_batch: clean, residual and seed counts differ or are empty"));
        }
        for (c, r) in clean.iter().zip(residuals) {
            c.same_shape(r, "clean vs prompt residual")?;
            c.same_shape(&clean[0], "batch items")?;
        }
        let (h, w) = clean[0].shape();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::contract(format!("image dims {h}x{w} must be multiples of 8")));
        }
        let ct = nhwc_from_images(clean, self.pae.dtype(), self.pae.device())?;
        let rt = nhwc_from_images(residuals, self.pae.dtype(), self.pae.device())?;
        let z = self.sample_latents(&ct, &rt, seeds)?;
        let raw = images_from_nhwc(&self.pae.decode(&z, &ct)?)?;
        Ok(raw
            .into_iter()
            .map(|img| {
                let clipped = img.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
                Generated {
                    saturation: clipped as f64 / img.data.len() as f64,
                    image: img.clamp01(),
                }
            })
            .collect())
    }

    /// Paired mode: the prompt residual is `noisy_ref − clean`.
    pub fn generate_paired(&self, clean: &Image, noisy_ref: &Image, seed: u64) -> Result<Generated> {
        clean.same_shape(noisy_ref, "clean vs noisy reference")?;
        let residual = noisy_ref.sub(clean)?;
        Ok(self.generate_batch(std::slice::from_ref(clean), &[residual], &[seed])?.remove(0))
    }

    /// Unpaired mode: the prompt residual is drawn from `bank` and fitted to the clean dims.
    /// Returns the output and the id of the prompt source.
    pub fn generate_unpaired(&self, clean: &Image, bank: &NoiseBank, seed: u64) -> Result<(Generated, String)> {
        let (id, residual) = bank.pick(seed)?;
        let fitted = residual.fit_to(clean.height, clean.width);
        let g = self.generate_batch(std::slice::from_ref(clean), &[fitted], &[seed])?.remove(0);
        Ok((g, id.clone()))
    }
}

/// Where prompts come from when synthesizing a dataset.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    /// Noisy references with the same file names as the clean images.
    Paired(PathBuf),
    Bank(NoiseBank),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clean: String,
    /// Path of the generated image relative to the output directory.
    pub output: String,
    pub seed: u64,
    pub prompt_source: String,
    pub height: usize,
    pub width: usize,
    pub saturation: f64,
}

/// Per-output seed derived from the global seed, image index and replica index.
pub fn item_seed(seed: u64, image: usize, replica: usize) -> u64 {
    rng::derive_seed(seed, "synthesize", &[image as u64, replica as u64])
}

/// Largest centred crop whose sides are multiples of 8.
pub fn crop_to_multiple_of_8(img: &Image) -> Result<Image> {
    let (h, w) = (img.height / 8 * 8, img.width / 8 * 8);
    if h == 0 || w == 0 {
        return Err(Error::contract(format!("image {}x{} is smaller than 8x8", img.height, img.width)));
    }
    Ok(img.crop((img.height - h) / 2, (img.width - w) / 2, h, w)?)
}

/// Writes `multiplier` synthetic noisy images per clean image as a paired dataset
/// (`out/clean/*.png`, `out/noisy/*.png`, optional `*.f32` sidecars) plus `out/manifest.jsonl`.
pub fn synthesize_dataset(
    gen: &Generator,
    clean_dir: &Path,
    source: &NoiseSource,
    multiplier: usize,
    out_dir: &Path,
    seed: u64,
    float_sidecar: bool,
) -> Result<Vec<ManifestRow>> {
    if multiplier == 0 {
        return Err(Error::config("multiplier must be >= 1"));
    }
    let cleans = list_pngs(clean_dir)?;
    if cleans.is_empty() {
        return Err(Error::config(format!("no PNG images in {}", clean_dir.display())));
    }
    let (out_clean, out_noisy) = (out_dir.join("clean"), out_dir.join("noisy"));
    for d in [&out_clean, &out_noisy] {
        std::fs::create_dir_all(d).map_err(|e| CoreError::io(d, e))?;
    }
    let mut rows = Vec::with_capacity(cleans.len() * multiplier);
    for (i, (name, path)) in cleans.iter().enumerate() {
        let clean = crop_to_multiple_of_8(&Image::load_png(path)?)?;
        let stem = name.trim_end_matches(".png");
        for r in 0..multiplier {
            let s = item_seed(seed, i, r);
            let (g, prompt) = match source {
                NoiseSource::Paired(noisy_dir) => {
                    let noisy_path = noisy_dir.join(name);
                    let noisy = crop_to_multiple_of_8(&Image::load_png(&noisy_path)?)?;
                    (gen.generate_paired(&clean, &noisy, s)?, noisy_path.display().to_string())
                }
                NoiseSource::Bank(bank) => gen.generate_unpaired(&clean, bank, s)?,
            };
            let file = format!("{stem}_r{r}.png");
            clean.save_png(&out_clean.join(&file))?;
            g.image.save_png(&out_noisy.join(&file))?;
            if float_sidecar {
                g.image.save_f32(&out_noisy.join(format!("{stem}_r{r}.f32")))?;
            }
            rows.push(ManifestRow {
                clean: path.display().to_string(),
                output: format!("noisy/{file}"),
                seed: s,
                prompt_source: prompt,
                height: clean.height,
                width: clean.width,
                saturation: g.saturation,
            });
        }
    }
    rows.sort_by(|a, b| a.output.cmp(&b.output));
    let mpath = out_dir.join(MANIFEST);
    let mut f = std::fs::File::create(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
    for row in &rows {
        writeln!(f, "{}", serde_json::to_string(row).expect("row serializes")).map_err(|e| CoreError::io(&mpath, e))?;
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                Error::Core(CoreError::Parse {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })
            })
        })
        .collect()
}
