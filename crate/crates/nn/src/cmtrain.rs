//! Consistency training of the P-DiT in the (normalized) PAE latent space.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use noiseprompt_core::config::{CmConfig, RunConfig};
use noiseprompt_core::data::{PairedDataset, PatchBatch};
use noiseprompt_core::rng;
use noiseprompt_core::schedule::{loss_weight, pseudo_huber_c, Curriculum, SigmaSchedule, TimestepSampler};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Expect};
use crate::error::{Error, Result};
use crate::ops::nhwc_from_images;
use crate::optim::{clip_grad_norm, collect_grads, ema_update, Adam};
use crate::pae::{Pae, PromptFeatures};
use crate::pdit::{Conditioning, DropoutKey, Pdit};
use crate::train::{due, ensure_finite, prefetch, scalar, LogSink};

pub const CHECKPOINT_KIND: &str = "pdit";
/// Channels whose latent std falls below this are considered degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;
const STUDENT: &str = "student.";
const EMA: &str = "ema.";

/// Per-channel latent normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sigma_data: f64,
}

/// Streaming per-channel mean/variance (Chan et al. pairwise merge).
#[derive(Debug, Clone, Default)]
pub struct ChannelMoments {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ChannelMoments {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Adds every channels-last row of `values` (length a multiple of the channel count).
    pub fn update(&mut self, values: &[f64]) {
        let c = self.mean.len();
        let n = (values.len() / c) as f64;
        if n == 0.0 {
            return;
        }
        let mut bm = vec![0.0; c];
        for row in values.chunks_exact(c) {
            for (m, v) in bm.iter_mut().zip(row) {
                *m += v;
            }
        }
        bm.iter_mut().for_each(|m| *m /= n);
        let mut bm2 = vec![0.0; c];
        for row in values.chunks_exact(c) {
            for ((s, v), m) in bm2.iter_mut().zip(row).zip(&bm) {
                *s += (v - m) * (v - m);
            }
        }
        let total = self.count + n;
        for j in 0..c {
            let delta = bm[j] - self.mean[j];
            self.mean[j] += delta * n / total;
            self.m2[j] += bm2[j] + delta * delta * self.count * n / total;
        }
        self.count = total;
    }

    /// Population standard deviations.
    pub fn std(&self) -> Vec<f64> {
        self.m2.iter().map(|m| (m / self.count.max(1.0)).sqrt()).collect()
    }
}

impl LatentStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::config("latent stats: mean/std lengths differ or are empty"));
        }
        if let Some((j, s)) = self.std.iter().enumerate().find(|(_, s)| !(**s >= DEGENERATE_STD)) {
            return Err(Error::aborted(format!(
                "latent channel {j} is degenerate (std {s:e}); the PAE collapsed or the dataset has no noise variation"
            )));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("sigma_data must be positive"));
        }
        Ok(())
    }

    fn broadcast(&self, v: &[f64], like: &Tensor) -> Result<Tensor> {
        let c = like.dim(candle_core::D::Minus1)?;
        if c != v.len() {
            return Err(Error::contract(format!("latent has {c} channels, stats have {}", v.len())));
        }
        Ok(Tensor::from_slice(v, c, like.device())?.to_dtype(like.dtype())?)
    }

    /// `(z − mean) / std · σ_data`.
    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        let scale: Vec<f64> = self.std.iter().map(|s| self.sigma_data / s).collect();
        Ok(z.broadcast_sub(&self.broadcast(&self.mean, z)?)?.broadcast_mul(&self.broadcast(&scale, z)?)?)
    }

    /// Exact inverse of [`LatentStats::normalize`].
    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        let scale: Vec<f64> = self.std.iter().map(|s| s / self.sigma_data).collect();
        Ok(z.broadcast_mul(&self.broadcast(&scale, z)?)?.broadcast_add(&self.broadcast(&self.mean, z)?)?)
    }
}

fn encode_batch(pae: &Pae, b: &PatchBatch) -> Result<(Tensor, Tensor, PromptFeatures)> {
    let clean = nhwc_from_images(&b.clean, pae.dtype(), pae.device())?;
    let noisy = nhwc_from_images(&b.noisy, pae.dtype(), pae.device())?;
    let (z, prompts) = pae.encode(&(noisy - &clean)?)?;
    Ok((clean, z.detach(), prompts.detach()))
}

/// Channel-wise latent mean/std over `n_batches` sampled patch batches.
pub fn compute_latent_stats(pae: &Pae, dataset: &PairedDataset, run: &RunConfig) -> Result<LatentStats> {
    let cm = &run.cm;
    if cm.stats_batches == 0 {
        return Err(Error::config("stats_batches must be >= 1"));
    }
    let mut acc = ChannelMoments::new(pae.cfg.c_z);
    for i in 0..cm.stats_batches {
        let b = dataset.sample_patch_batch(cm.batch, run.pae.patch, stats_batch_index(i))?;
        let (_, z, _) = encode_batch(pae, &b)?;
        acc.update(&z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    let stats = LatentStats {
        mean: acc.mean.clone(),
        std: acc.std(),
        sigma_data: cm.sigma_data,
    };
    stats.validate()?;
    Ok(stats)
}

/// Patch-batch indices used for latent statistics live in their own range so they never
/// coincide with training iterations.
fn stats_batch_index(i: usize) -> u64 {
    (1u64 << 40) + i as u64
}

/// Everything a consistency-training loop mutates.
#[derive(Debug)]
pub struct TrainState {
    pub student: Pdit,
    pub ema: Pdit,
    pub opt: Adam,
    pub k: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(run: &RunConfig, dtype: DType) -> Result<Self> {
        let mk = || Pdit::new(&run.pdit, &run.pae, run.cm.edm(), run.cm.sigma_min, run.seed, dtype);
        let student = mk()?;
        let ema = mk()?;
        ema.params.copy_from(&student.params)?;
        Ok(Self {
            student,
            ema,
            opt: Adam::radam(),
            k: 0,
            seed: run.seed,
        })
    }
}

/// One training example after encoding: normalized latent and conditioning inputs.
#[derive(Debug, Clone)]
pub struct CtBatch {
    pub clean: Tensor,
    pub z0: Tensor,
    pub prompts: PromptFeatures,
}

/// What one consistency step drew and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    pub steps: usize,
    pub t: Vec<usize>,
    pub sigma_t: Vec<f64>,
    pub sigma_next: Vec<f64>,
    pub lambda: Vec<f64>,
    pub grad_norm: f64,
}

/// Schedule pieces derived once from the config.
#[derive(Debug, Clone)]
pub struct CtSchedule {
    pub sigma: SigmaSchedule,
    pub curriculum: Curriculum,
    pub sampler: TimestepSampler,
}

impl CtSchedule {
    pub fn new(cm: &CmConfig) -> Result<Self> {
        Ok(Self {
            sigma: cm.schedule()?,
            curriculum: cm.curriculum()?,
            sampler: cm.sampler(),
        })
    }
}

/// Per-sample pseudo-Huber distances `√(‖a_b − b_b‖² + c²) − c`, shape `B`.
pub fn pseudo_huber_rows(a: &Tensor, b: &Tensor, c: f64) -> Result<Tensor> {
    let n = a.dim(0)?;
    let sq = (a - b)?.sqr()?.reshape((n, ()))?.sum(1)?;
    // same value as √(sq + c²) − c without the cancellation for small residuals
    let denom = ((&sq + c * c)?.sqrt()? + c)?;
    Ok((sq / denom)?)
}

/// The consistency-training loss of one batch (no optimizer step). Returns the scalar loss
/// tensor and what was drawn.
pub fn ct_loss(state: &TrainState, batch: &CtBatch, sched: &CtSchedule) -> Result<(Tensor, StepInfo)> {
    ct_loss_against(state, &state.student, batch, sched)
}

/// [`ct_loss`] with the teacher evaluated by `teacher` instead of the student itself; a frozen
/// copy of the student gives the same loss and gradients, since the teacher path is detached.
pub fn ct_loss_against(state: &TrainState, teacher: &Pdit, batch: &CtBatch, sched: &CtSchedule) -> Result<(Tensor, StepInfo)> {
    let k = state.k;
    let (b, h, w, c) = batch.z0.dims4()?;
    let n_steps = sched.curriculum.steps(k.min(sched.curriculum.total_iters))?;
    let dist = sched.sampler.distribution(n_steps, &sched.sigma)?;
    let mut s = rng::stream(state.seed, "ct-step", k as u64);
    let mut info = StepInfo {
        loss: 0.0,
        steps: n_steps,
        t: Vec::with_capacity(b),
        sigma_t: Vec::with_capacity(b),
        sigma_next: Vec::with_capacity(b),
        lambda: Vec::with_capacity(b),
        grad_norm: 0.0,
    };
    for _ in 0..b {
        let t = rand::distr::Distribution::sample(&dist, &mut s) + 1;
        let st = sched.sigma.sigma_at(t, n_steps)?;
        let sn = sched.sigma.sigma_at(t + 1, n_steps)?;
        info.t.push(t);
        info.sigma_t.push(st);
        info.sigma_next.push(sn);
        info.lambda.push(loss_weight(st, sn)?);
    }
    let dev = batch.z0.device();
    let dtype = batch.z0.dtype();
    let eps = Tensor::from_vec(rng::normal_vec(&mut s, b * h * w * c), (b, h, w, c), dev)?.to_dtype(dtype)?;
    let col = |v: &[f64]| -> Result<Tensor> { Ok(Tensor::from_slice(v, (b, 1, 1, 1), dev)?.to_dtype(dtype)?) };
    // one shared ε for both noise levels
    let z_t = (&batch.z0 + eps.broadcast_mul(&col(&info.sigma_t)?)?)?;
    let z_next = (&batch.z0 + eps.broadcast_mul(&col(&info.sigma_next)?)?)?;
    let cond_rng = || rng::stream(state.seed, "ct-cond-noise", k as u64);
    let cond = state.student.cond_embed(&batch.clean, &batch.prompts, Some(&mut cond_rng()))?;
    let key = DropoutKey {
        rate: state.student.cfg.dropout,
        seed: state.seed,
        step: k as u64,
    };
    let student = state.student.consistency_fn(&z_next, &info.sigma_next, &cond, Some(&key))?;
    let teacher_cond = if std::ptr::eq(teacher, &state.student) {
        Conditioning {
            map: cond.map.detach(),
            pooled: cond.pooled.detach(),
        }
    } else {
        teacher.cond_embed(&batch.clean, &batch.prompts, Some(&mut cond_rng()))?
    };
    // stop-gradient teacher at the lower noise level
    let teacher = teacher.consistency_fn(&z_t, &info.sigma_t, &teacher_cond, Some(&key))?.detach();
    let d = pseudo_huber_rows(&student, &teacher, pseudo_huber_c(h * w * c))?;
    let loss = (d * col(&info.lambda)?.reshape(b)?)?.mean_all()?;
    info.loss = scalar(&loss)?;
    Ok((loss, info))
}

/// Loss, backward pass, clipping, optimizer step and EMA update; `k ← k + 1`.
pub fn ct_step(state: &mut TrainState, batch: &CtBatch, cm: &CmConfig, sched: &CtSchedule, last_good: Option<&Path>) -> Result<StepInfo> {
    let (loss, mut info) = ct_loss(state, batch, sched)?;
    ensure_finite(info.loss, state.k, last_good)?;
    let mut grads = collect_grads(&state.student.params, &loss.backward()?);
    info.grad_norm = clip_grad_norm(&mut grads, cm.grad_clip)?;
    state.opt.step(&state.student.params, &grads, cm.lr)?;
    ema_update(&state.ema.params, &state.student.params, cm.ema_decay)?;
    state.k += 1;
    Ok(info)
}

/// Encodes patch batches with the frozen PAE. When every training image is exactly one patch,
/// encodings are computed once and reused.
pub struct BatchSource<'a> {
    pae: &'a Pae,
    dataset: &'a PairedDataset,
    stats: &'a LatentStats,
    batch: usize,
    patch: usize,
    cache: Option<Vec<(Tensor, Tensor, PromptFeatures)>>,
}

impl<'a> BatchSource<'a> {
    pub fn new(pae: &'a Pae, dataset: &'a PairedDataset, stats: &'a LatentStats, batch: usize, patch: usize) -> Result<Self> {
        let whole = dataset.pairs.iter().all(|p| p.clean.shape() == (patch, patch));
        let cache = if whole {
            let mut v = Vec::with_capacity(dataset.len());
            for p in &dataset.pairs {
                let b = PatchBatch {
                    clean: vec![p.clean.clone()],
                    noisy: vec![p.noisy.clone()],
                    sources: vec![0],
                };
                v.push(encode_batch(pae, &b)?);
            }
            Some(v)
        } else {
            None
        };
        Ok(Self {
            pae,
            dataset,
            stats,
            batch,
            patch,
            cache,
        })
    }

    pub fn get(&self, k: usize) -> Result<CtBatch> {
        let b = self.dataset.sample_patch_batch(self.batch, self.patch, k as u64)?;
        let (clean, z, prompts) = match &self.cache {
            Some(cache) => {
                let rows: Vec<&(Tensor, Tensor, PromptFeatures)> = b.sources.iter().map(|i| &cache[*i]).collect();
                (
                    Tensor::cat(&rows.iter().map(|r| &r.0).collect::<Vec<_>>(), 0)?,
                    Tensor::cat(&rows.iter().map(|r| &r.1).collect::<Vec<_>>(), 0)?,
                    PromptFeatures::cat(&rows.iter().map(|r| r.2.clone()).collect::<Vec<_>>())?,
                )
            }
            None => encode_batch(self.pae, &b)?,
        };
        Ok(CtBatch {
            clean,
            z0: self.stats.normalize(&z)?,
            prompts,
        })
    }
}

/// Runs consistency training; periodic checkpoints go to `out/iter-{k}`, the final one to
/// `out/final`.
pub fn train_pdit(
    dataset: &PairedDataset,
    pae: &Pae,
    stats: Option<&LatentStats>,
    run: &RunConfig,
    out: Option<&Path>,
    log: LogSink,
) -> Result<Checkpoint> {
    run.validate()?;
    let stats = stats.ok_or_else(|| Error::config("latent statistics are required before consistency training"))?;
    stats.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let cm = &run.cm;
    let sched = CtSchedule::new(cm)?;
    let mut state = TrainState::new(run, DType::F32)?;
    let source = BatchSource::new(pae, dataset, stats, cm.batch, run.pae.patch)?;
    let mut losses = Vec::with_capacity(cm.iterations);
    let mut last_good: Option<PathBuf> = None;
    prefetch(
        cm.iterations,
        2,
        |k| source.get(k),
        |k, batch| {
            let info = ct_step(&mut state, &batch, cm, &sched, last_good.as_deref())?;
            losses.push((k, info.loss));
            if due(k, cm.iterations, cm.log_every) {
                log(&serde_json::json!({
                    "stage": "pdit",
                    "iteration": k,
                    "steps": info.steps,
                    "sigma_t": info.sigma_t,
                    "loss": info.loss,
                    "lambda": info.lambda,
                    "grad_norm": info.grad_norm,
                }));
            }
            if let Some(dir) = out {
                if cm.checkpoint_every > 0 && (k + 1) % cm.checkpoint_every == 0 && k + 1 < cm.iterations {
                    let path = dir.join(format!("iter-{}", k + 1));
                    to_checkpoint(&state, stats, pae, run, losses.clone())?.save(&path)?;
                    last_good = Some(path);
                }
            }
            Ok(())
        },
    )?;
    let ckpt = to_checkpoint(&state, stats, pae, run, losses)?;
    if let Some(dir) = out {
        ckpt.save(&dir.join("final"))?;
    }
    Ok(ckpt)
}

pub fn to_checkpoint(state: &TrainState, stats: &LatentStats, pae: &Pae, run: &RunConfig, losses: Vec<(usize, f64)>) -> Result<Checkpoint> {
    let mut tensors = std::collections::BTreeMap::new();
    for (k, v) in state.student.params.snapshot()? {
        tensors.insert(format!("{STUDENT}{k}"), v);
    }
    for (k, v) in state.ema.params.snapshot()? {
        tensors.insert(format!("{EMA}{k}"), v);
    }
    Ok(Checkpoint {
        kind: CHECKPOINT_KIND.into(),
        fingerprint: run.fingerprint(),
        iteration: state.k,
        tensors,
        meta: serde_json::json!({
            "latent_stats": stats,
            "pae_fingerprint": crate::pae::fingerprint(&pae.cfg),
        }),
        config: run.clone(),
        losses,
    })
}

/// A trained consistency model ready for generation (EMA weights).
#[derive(Debug, Clone)]
pub struct TrainedPdit {
    pub model: Pdit,
    pub stats: LatentStats,
    pub pae_fingerprint: String,
    pub config: RunConfig,
}

impl TrainedPdit {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::config(format!("expected a {CHECKPOINT_KIND} checkpoint, got {}", ckpt.kind)));
        }
        let run = &ckpt.config;
        let stats: LatentStats = serde_json::from_value(ckpt.meta["latent_stats"].clone())
            .map_err(|e| Error::config(format!("checkpoint lacks latent statistics: {e}")))?;
        stats.validate()?;
        let model = Pdit::new(&run.pdit, &run.pae, run.cm.edm(), run.cm.sigma_min, run.seed, DType::F32)?;
        model.params.load(&ckpt.group(EMA))?;
        Ok(Self {
            model,
            stats,
            pae_fingerprint: ckpt.meta["pae_fingerprint"].as_str().unwrap_or_default().to_string(),
            config: run.clone(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir, &Expect { kind: Some(CHECKPOINT_KIND), ..Default::default() })?)
    }
}
