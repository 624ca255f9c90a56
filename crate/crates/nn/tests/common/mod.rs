#![allow(dead_code)]

use candle_core::DType;
use noiseprompt_core::config::{CmConfig, DenoiserConfig, PaeConfig, PditConfig, RunConfig};
use noiseprompt_core::data::{toy_pairs, NoiseModel, Pair, PairedDataset};
use noiseprompt_nn::cmtrain::{LatentStats, TrainedPdit};
use noiseprompt_nn::pae::{self, Pae};
use noiseprompt_nn::pdit::Pdit;

/// A run small enough for unit-speed integration tests.
pub fn tiny_run(seed: u64) -> RunConfig {
    let mut run = RunConfig {
        seed,
        ..RunConfig::default()
    };
    run.pae = PaeConfig {
        trunk: [4, 8, 8, 8],
        c_global: 2,
        c_local: 2,
        c_z: 2,
        rho: 3,
        patch: 16,
        batch: 2,
        iterations: 40,
        lr: 2e-3,
        lr_min: 1e-4,
        log_every: 10,
        ..PaeConfig::default()
    };
    run.pdit = PditConfig {
        num_blocks: 1,
        hidden_dim: 16,
        num_heads: 2,
        cond_channels: 2,
        ..PditConfig::default()
    };
    run.cm = CmConfig {
        iterations: 50,
        batch: 2,
        stats_batches: 2,
        ema_decay: 0.9,
        lr: 1e-3,
        log_every: 10,
        ..CmConfig::default()
    };
    run.denoiser = DenoiserConfig {
        depth: 3,
        width: 8,
        patch: 16,
        batch: 4,
        iterations: 60,
        lr: 3e-3,
        lr_min: 1e-4,
        log_every: 10,
        ..DenoiserConfig::default()
    };
    run
}

pub fn toy(n: usize, size: usize, seed: u64) -> Vec<Pair> {
    let model = NoiseModel::Heteroscedastic { a: 0.01, b: 0.0004 };
    toy_pairs(n, size, &model, &[], seed).unwrap().0
}

pub fn dataset(n: usize, size: usize, seed: u64) -> PairedDataset {
    PairedDataset::new(toy(n, size, seed), seed, "train").unwrap()
}

/// Untrained but complete generator models for `run`.
pub fn untrained_models(run: &RunConfig) -> (Pae, TrainedPdit) {
    let pae = Pae::new(&run.pae, run.seed, DType::F32).unwrap();
    let model = Pdit::new(&run.pdit, &run.pae, run.cm.edm(), run.cm.sigma_min, run.seed, DType::F32).unwrap();
    let stats = LatentStats {
        mean: vec![0.0; run.pae.c_z],
        std: vec![1.0; run.pae.c_z],
        sigma_data: run.cm.sigma_data,
    };
    let pdit = TrainedPdit {
        model,
        stats,
        pae_fingerprint: pae::fingerprint(&run.pae),
        config: run.clone(),
    };
    (pae, pdit)
}
