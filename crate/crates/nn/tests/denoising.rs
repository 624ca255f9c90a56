mod common;

use noiseprompt_core::data::{toy_pairs, NoiseModel, PairedDataset};
use noiseprompt_nn::denoise::{eval_denoiser, train_denoiser, Denoiser};
use noiseprompt_nn::train::discard;

fn gaussian(n: usize, size: usize, seed: u64) -> PairedDataset {
    let (pairs, _) = toy_pairs(n, size, &NoiseModel::Gaussian { sigma: 0.08 }, &[], seed).unwrap();
    PairedDataset::new(pairs, seed, "denoiser").unwrap()
}

#[test]
fn training_beats_the_identity_and_round_trips() {
    let mut run = common::tiny_run(1);
    run.denoiser.iterations = 150;
    let train = gaussian(4, 32, 1);
    let test = gaussian(2, 32, 2);
    let dir = tempfile::tempdir().unwrap();
    let (model, ckpt) = train_denoiser(Some(&train), None, &run, Some(dir.path()), &mut discard).unwrap();
    let first: f64 = ckpt.losses[..10].iter().map(|l| l.1).sum();
    let last: f64 = ckpt.losses[ckpt.losses.len() - 10..].iter().map(|l| l.1).sum();
    assert!(last < first, "{first} -> {last}");

    let report = eval_denoiser(&model, &test.pairs).unwrap();
    let identity = noiseprompt_nn::denoise::evaluate(&test.pairs, |i| Ok(i.clone())).unwrap();
    assert!(report.mean_psnr() > identity.mean_psnr() + 1.0, "{} vs {}", report.mean_psnr(), identity.mean_psnr());

    let restored = Denoiser::load(dir.path()).unwrap();
    assert_eq!(eval_denoiser(&restored, &test.pairs).unwrap(), report);
}

#[test]
fn source_selection_follows_mix_ratio() {
    let mut run = common::tiny_run(2);
    run.denoiser.iterations = 4;
    let real = gaussian(2, 16, 3);
    let synth = gaussian(2, 16, 4);
    run.denoiser.mix_ratio = 0.0;
    let (_, c) = train_denoiser(Some(&real), Some(&synth), &run, None, &mut discard).unwrap();
    assert_eq!(c.meta["synthetic_batches"], 0);
    run.denoiser.mix_ratio = 1.0;
    let (_, c) = train_denoiser(Some(&real), Some(&synth), &run, None, &mut discard).unwrap();
    assert_eq!(c.meta["synthetic_batches"], 4);
}

#[test]
fn missing_sources_are_configuration_errors() {
    let mut run = common::tiny_run(3);
    assert!(train_denoiser(None, None, &run, None, &mut discard).unwrap_err().is_config());
    run.denoiser.mix_ratio = 0.5;
    let real = gaussian(2, 16, 3);
    assert!(train_denoiser(Some(&real), None, &run, None, &mut discard).unwrap_err().is_config());
}

#[test]
fn deep_denoiser_learns_signal_dependent_noise() {
    let mut run = common::tiny_run(4);
    run.denoiser.depth = 8;
    run.denoiser.width = 16;
    run.denoiser.batch = 8;
    run.denoiser.patch = 24;
    run.denoiser.iterations = 300;
    run.denoiser.lr = 1e-3;
    let model = NoiseModel::Heteroscedastic { a: 0.004, b: 0.0002 };
    let (pairs, _) = toy_pairs(4, 32, &model, &[0.5, 1.5], 5).unwrap();
    let train = PairedDataset::new(pairs, 5, "denoiser").unwrap();
    let (_, ckpt) = train_denoiser(Some(&train), None, &run, None, &mut discard).unwrap();
    let mean = |s: &[(usize, f64)]| s.iter().map(|l| l.1).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&ckpt.losses[..20]), mean(&ckpt.losses[280..]));
    assert!(last < 0.9 * first, "{first} -> {last}");
}
