//! DnCNN-style residual denoiser and its PSNR/SSIM evaluation harness.

use std::path::Path;

use candle_core::{DType, Tensor};
use noiseprompt_core::config::{DenoiserConfig, RunConfig};
use noiseprompt_core::data::{Pair, PairedDataset};
use noiseprompt_core::noisestats::{psnr, ssim};
use noiseprompt_core::{rng, Error as CoreError, Image};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Expect};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::{images_from_nhwc, nhwc_from_images};
use crate::optim::{collect_grads, cosine_lr, Adam};
use crate::params::{Init, ParamStore};
use crate::train::{due, ensure_finite, prefetch, scalar, LogSink};

pub const CHECKPOINT_KIND: &str = "denoiser";
/// Images are denoised in batches of at most this many pixels.
const INFER_PIXELS: usize = 1 << 18;
/// Scale of the output layer's He init relative to the hidden layers; a small head starts the
/// model close to the identity while still passing gradient to every layer.
const HEAD_INIT_SCALE: f64 = 0.1;

/// `conv-ReLU → (depth−2)×(conv-ReLU) → conv`, predicting the noise residual.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamStore,
    pub layers: Vec<Conv2d>,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c_in = if i == 0 { 3 } else { cfg.width };
            let last = i + 1 == cfg.depth;
            let c_out = if last { 3 } else { cfg.width };
            // He init keeps activation variance through the ReLU stack; with a smaller init or
            // a zero head, L1 training on signal-dependent noise sits on a plateau for
            // thousands of iterations
            let std = (2.0 / (9 * c_in) as f64).sqrt() * if last { HEAD_INIT_SCALE } else { 1.0 };
            layers.push(Conv2d::with_init(&mut ps, &format!("layer{i}"), c_in, c_out, 3, Init::Normal(std), Init::Zeros)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            layers,
        })
    }

    /// `noisy − residual(noisy)` on a `B×H×W×3` tensor.
    pub fn forward(&self, noisy: &Tensor) -> Result<Tensor> {
        let mut h = noisy.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok((noisy - h)?)
    }

    /// Denoises images of any size; output clamped to `[0, 1]`.
    pub fn denoise(&self, img: &Image) -> Result<Image> {
        self.denoise_in_strips(img, INFER_PIXELS)
    }

    /// Processes horizontal strips of at most about `max_pixels` pixels, each padded by a margin
    /// covering the receptive field so the result matches whole-image inference.
    fn denoise_in_strips(&self, img: &Image, max_pixels: usize) -> Result<Image> {
        let (h, w) = img.shape();
        let margin = self.cfg.depth;
        let rows = (max_pixels / w).saturating_sub(2 * margin).max(1);
        if rows >= h {
            return self.denoise_whole(img);
        }
        let mut out = Image::zeros(h, w);
        let mut y = 0;
        while y < h {
            let y1 = (y + rows).min(h);
            let (a, b) = (y.saturating_sub(margin), (y1 + margin).min(h));
            let strip = self.denoise_whole(&img.crop(a, 0, b - a, w)?)?;
            let (src, dst) = (strip.idx(y - a, 0, 0), out.idx(y, 0, 0));
            let n = (y1 - y) * w * 3;
            out.data[dst..dst + n].copy_from_slice(&strip.data[src..src + n]);
            y = y1;
        }
        Ok(out)
    }

    fn denoise_whole(&self, img: &Image) -> Result<Image> {
        let x = nhwc_from_images(std::slice::from_ref(img), self.params.dtype(), self.params.device())?;
        Ok(images_from_nhwc(&self.forward(&x)?.clamp(0.0, 1.0)?)?.remove(0))
    }

    pub fn to_checkpoint(&self, run: &RunConfig, iteration: usize, losses: Vec<(usize, f64)>, meta: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            fingerprint: noiseprompt_core::config::fingerprint_of(&self.cfg),
            iteration,
            tensors: self.params.snapshot()?,
            meta,
            config: run.clone(),
            losses,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::config(format!("expected a {CHECKPOINT_KIND} checkpoint, got {}", ckpt.kind)));
        }
        let d = Denoiser::new(&ckpt.config.denoiser, ckpt.config.seed, DType::F32)?;
        d.params.load(&ckpt.tensors)?;
        Ok(d)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir, &Expect { kind: Some(CHECKPOINT_KIND), ..Default::default() })?)
    }
}

/// Which training subset a batch is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

/// Keyed Bernoulli(`mix_ratio`) choice of the subset for batch `k`; falls back to whichever
/// subset exists.
pub fn batch_source(seed: u64, k: usize, mix_ratio: f64, have_real: bool, have_synth: bool) -> Source {
    match (have_real, have_synth) {
        (true, false) => Source::Real,
        (false, true) => Source::Synthetic,
        _ => {
            if rng::stream(seed, "denoiser-source", k as u64).random::<f64>() < mix_ratio {
                Source::Synthetic
            } else {
                Source::Real
            }
        }
    }
}

/// L1 training on random aligned crops with 8-fold dihedral augmentation. Each batch comes
/// from the synthetic subset with probability `mix_ratio`, else from the real subset.
pub fn train_denoiser(
    real: Option<&PairedDataset>,
    synth: Option<&PairedDataset>,
    run: &RunConfig,
    out: Option<&Path>,
    log: LogSink,
) -> Result<(Denoiser, Checkpoint)> {
    let cfg = &run.denoiser;
    cfg.validate()?;
    let have_real = real.is_some_and(|d| !d.is_empty());
    let have_synth = synth.is_some_and(|d| !d.is_empty());
    if !have_real && !have_synth {
        return Err(Error::config("denoiser training needs real or synthetic pairs"));
    }
    if have_real && !have_synth && cfg.mix_ratio > 0.0 {
        return Err(Error::config(format!("mix_ratio {} needs synthetic pairs", cfg.mix_ratio)));
    }
    let model = Denoiser::new(cfg, run.seed, DType::F32)?;
    let mut opt = Adam::adam();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut synthetic_batches = 0usize;
    let (dtype, dev) = (model.params.dtype(), model.params.device().clone());
    prefetch(
        cfg.iterations,
        2,
        |k| {
            let src = batch_source(run.seed, k, cfg.mix_ratio, have_real, have_synth);
            let ds = match src {
                Source::Real => real.expect("checked"),
                Source::Synthetic => synth.expect("checked"),
            };
            let b = ds.sample_patch_batch(cfg.batch, cfg.patch, k as u64)?;
            let mut aug = rng::stream(run.seed, "denoiser-augment", k as u64);
            let (mut clean, mut noisy) = (Vec::with_capacity(b.len()), Vec::with_capacity(b.len()));
            for (c, n) in b.clean.iter().zip(&b.noisy) {
                let t: u8 = aug.random_range(0..8);
                clean.push(c.dihedral(t));
                noisy.push(n.dihedral(t));
            }
            Ok((src, nhwc_from_images(&clean, dtype, &dev)?, nhwc_from_images(&noisy, dtype, &dev)?))
        },
        |k, (src, clean, noisy)| {
            let lr = cosine_lr(k, cfg.iterations, cfg.lr, cfg.lr_min);
            let loss = (model.forward(&noisy)? - &clean)?.abs()?.mean_all()?;
            let value = scalar(&loss)?;
            ensure_finite(value, k, None)?;
            let grads = collect_grads(&model.params, &loss.backward()?);
            opt.step(&model.params, &grads, lr)?;
            losses.push((k, value));
            if src == Source::Synthetic {
                synthetic_batches += 1;
            }
            if due(k, cfg.iterations, cfg.log_every) {
                log(&serde_json::json!({"stage": "denoiser", "iteration": k, "loss": value, "lr": lr, "source": src}));
            }
            Ok(())
        },
    )?;
    let meta = serde_json::json!({"synthetic_batches": synthetic_batches});
    let ckpt = model.to_checkpoint(run, cfg.iterations, losses, meta)?;
    if let Some(dir) = out {
        ckpt.save(dir)?;
    }
    Ok((model, ckpt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.image_id, r.psnr_db, r.ssim));
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::Core(CoreError::io(path, e)))
    }
}

/// Scores `denoise(noisy)` against `clean` for every pair.
pub fn evaluate(pairs: &[Pair], mut denoise: impl FnMut(&Image) -> Result<Image>) -> Result<Report> {
    if pairs.is_empty() {
        return Err(Error::config("no evaluation pairs"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = denoise(&p.noisy)?;
        rows.push(ReportRow {
            image_id: p.id.clone(),
            psnr_db: psnr(&out, &p.clean)?,
            ssim: ssim(&out, &p.clean)?,
        });
    }
    Ok(Report { rows })
}

pub fn eval_denoiser(model: &Denoiser, pairs: &[Pair]) -> Result<Report> {
    evaluate(pairs, |img| model.denoise(img))
}
