//! The `noiseprompt` command line: argument parsing, configuration resolution and dispatch.
//!
//! Configuration precedence is config file, then the `NOISEPROMPT_SEED` environment variable,
//! then command-line flags. Progress is reported as one JSON object per line on stderr.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use noiseprompt_core::config::RunConfig;
use noiseprompt_core::rng::SEED_ENV;
use noiseprompt_core::data::{list_pngs, make_toy_dataset, NoiseModel, Pair, PairedDataset};
use noiseprompt_core::noisestats::{histogram, kld_histograms, KLD_BINS};
use noiseprompt_core::schedule::loss_weight;
use noiseprompt_core::Image;
use noiseprompt_nn::cmtrain::{compute_latent_stats, train_pdit};
use noiseprompt_nn::denoise::{evaluate, train_denoiser, Denoiser};
use noiseprompt_nn::genpipe::{synthesize_dataset, Generator, NoiseBank, NoiseSource};
use noiseprompt_nn::pae::{train_pae, Pae};

#[derive(Debug, Parser)]
#[command(name = "noiseprompt", version, about = "Prompt-driven camera-noise synthesis", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset with a known noise model.
    MakeToy(MakeToyArgs),
    /// Train the prompt autoencoder.
    TrainPae(TrainPaeArgs),
    /// Consistency-train the prompt DiT on latents of a frozen autoencoder.
    TrainPdit(TrainPditArgs),
    /// Synthesize noisy images for a directory of clean images.
    Generate(GenerateArgs),
    /// Per-image KLD/AKLD of generated against real noise.
    EvalNoise(EvalNoiseArgs),
    /// Train the residual denoiser on real and/or synthetic pairs.
    TrainDenoiser(TrainDenoiserArgs),
    /// PSNR/SSIM report of a denoiser on test pairs.
    EvalDenoiser(EvalDenoiserArgs),
    /// Noise-schedule utilities.
    Schedule {
        #[command(subcommand)]
        command: ScheduleCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCommand {
    /// CSV of the σ grid, timestep probabilities and loss weights for `N` levels.
    Dump {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Configuration flags shared by every run-producing subcommand.
#[derive(Debug, Clone, Args, Default)]
pub struct RunArgs {
    /// TOML run configuration; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides the config file and the environment).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ToyModel {
    Gaussian,
    Heteroscedastic,
    Correlated,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_enum, default_value = "heteroscedastic")]
    pub model: ToyModel,
    /// Noise std of the gaussian and correlated models.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Signal-dependent variance slope of the heteroscedastic model.
    #[arg(long, default_value_t = 0.004)]
    pub a: f64,
    /// Variance floor of the heteroscedastic model.
    #[arg(long, default_value_t = 0.0002)]
    pub b: f64,
    /// Side of the box kernel of the correlated model.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Per-image noise-std multipliers, cycled over the images.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub levels: Vec<f64>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPaeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset root with `clean/` and `noisy/` (overrides `data.root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPditArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained autoencoder checkpoint directory.
    #[arg(long)]
    pub pae: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Paired,
    Unpaired,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub pae: PathBuf,
    #[arg(long)]
    pub pdit: PathBuf,
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// Noisy references named like the clean images (paired mode).
    #[arg(long, conflicts_with = "noise_bank")]
    pub noisy_dir: Option<PathBuf>,
    /// Dataset root with `clean/` and `noisy/` whose residuals serve as prompts (unpaired mode).
    #[arg(long)]
    pub noise_bank: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub multiplier: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the unquantized output as raw little-endian f32.
    #[arg(long)]
    pub float_sidecar: bool,
    /// Accept a P-DiT checkpoint trained on a different autoencoder.
    #[arg(long)]
    pub allow_mismatch: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalNoiseArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    #[arg(long)]
    pub real_dir: PathBuf,
    /// Generated images named `<stem>.png` or `<stem>_r<k>.png` for the clean image `<stem>.png`.
    #[arg(long)]
    pub gen_dir: PathBuf,
    #[arg(long, default_value_t = KLD_BINS)]
    pub bins: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDenoiserArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset root of real pairs.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Dataset root of synthetic pairs (e.g. a `generate` output directory).
    #[arg(long)]
    pub synth: Option<PathBuf>,
    #[arg(long)]
    pub mix_ratio: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalDenoiserArgs {
    /// Denoiser checkpoint; omitted means the identity baseline.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset root of test pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes one JSON record per line to stderr.
pub fn log_line(v: &serde_json::Value) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{v}");
}

/// Resolves the run configuration: file (or desk preset), then environment, then flags.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig, root: Option<&Path>, tag: &str) -> Result<PairedDataset> {
    let root = root.unwrap_or(&cfg.data.root);
    let mut ds = PairedDataset::load(root, &cfg.data.clean_dir, &cfg.data.noisy_dir, cfg.seed)
        .with_context(|| format!("loading dataset {}", root.display()))?;
    ds.tag = tag.to_string();
    Ok(ds)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy(a) => make_toy(a),
        Command::TrainPae(a) => cmd_train_pae(a),
        Command::TrainPdit(a) => cmd_train_pdit(a),
        Command::Generate(a) => generate(a),
        Command::EvalNoise(a) => eval_noise(a),
        Command::TrainDenoiser(a) => cmd_train_denoiser(a),
        Command::EvalDenoiser(a) => eval_denoiser(a),
        Command::Schedule {
            command: ScheduleCommand::Dump { n, run },
        } => {
            let cfg = resolve_config(&run)?;
            print!("{}", schedule_csv(&cfg, n)?);
            Ok(())
        }
    }
}

fn make_toy(a: MakeToyArgs) -> Result<()> {
    let cfg = resolve_config(&a.run)?;
    let model = match a.model {
        ToyModel::Gaussian => NoiseModel::Gaussian { sigma: a.sigma },
        ToyModel::Heteroscedastic => NoiseModel::Heteroscedastic { a: a.a, b: a.b },
        ToyModel::Correlated => NoiseModel::Correlated {
            sigma: a.sigma,
            kernel: vec![1.0; a.kernel * a.kernel],
        },
    };
    make_toy_dataset(a.n, a.size, &model, &a.levels, cfg.seed, &a.out)?;
    log_line(&serde_json::json!({"stage": "make-toy", "out": a.out, "n": a.n, "size": a.size}));
    Ok(())
}

fn cmd_train_pae(a: TrainPaeArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    if let Some(k) = a.iterations {
        cfg.pae.iterations = k;
    }
    if let Some(b) = a.batch {
        cfg.pae.batch = b;
    }
    if let Some(d) = &a.data {
        cfg.data.root = d.clone();
    }
    let ds = load_dataset(&cfg, None, "pae")?;
    let ckpt = train_pae(&ds, &cfg, Some(&a.out), &mut log_line)?;
    log_line(&serde_json::json!({"stage": "pae", "event": "done", "checkpoint": a.out.join("final"), "fingerprint": ckpt.fingerprint}));
    Ok(())
}

fn cmd_train_pdit(a: TrainPditArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    if let Some(k) = a.iterations {
        cfg.cm.iterations = k;
    }
    if let Some(b) = a.batch {
        cfg.cm.batch = b;
    }
    if let Some(d) = &a.data {
        cfg.data.root = d.clone();
    }
    let pae = Pae::load(&a.pae, None, false)?;
    // the latent geometry comes from the trained autoencoder, not from this run's file
    cfg.pae = pae.cfg.clone();
    let ds = load_dataset(&cfg, None, "pdit")?;
    let stats = compute_latent_stats(&pae, &ds, &cfg)?;
    log_line(&serde_json::json!({"stage": "pdit", "event": "latent_stats", "mean": stats.mean, "std": stats.std}));
    train_pdit(&ds, &pae, Some(&stats), &cfg, Some(&a.out), &mut log_line)?;
    log_line(&serde_json::json!({"stage": "pdit", "event": "done", "checkpoint": a.out.join("final")}));
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let seed_args = RunArgs {
        config: None,
        seed: a.seed,
    };
    let seed = resolve_config(&seed_args)?.seed;
    let gen = Generator::load(&a.pae, &a.pdit, a.allow_mismatch)?;
    let source = match (a.mode, &a.noisy_dir, &a.noise_bank) {
        (Mode::Paired, Some(d), None) => NoiseSource::Paired(d.clone()),
        (Mode::Unpaired, None, Some(root)) => {
            let cfg = RunConfig::default();
            let ds = load_dataset(&cfg, Some(root), "bank")?;
            NoiseSource::Bank(NoiseBank::from_dataset(&ds))
        }
        (Mode::Paired, _, _) => bail!("paired mode needs --noisy-dir (and no --noise-bank)"),
        (Mode::Unpaired, _, _) => bail!("unpaired mode needs --noise-bank (and no --noisy-dir)"),
    };
    let rows = synthesize_dataset(&gen, &a.clean_dir, &source, a.multiplier, &a.out, seed, a.float_sidecar)?;
    let saturated = rows.iter().map(|r| r.saturation).fold(0.0, f64::max);
    log_line(&serde_json::json!({"stage": "generate", "event": "done", "outputs": rows.len(), "max_saturation": saturated}));
    Ok(())
}

/// Groups generated file names by the clean stem they belong to.
fn generated_by_stem(gen_dir: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut out: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for (name, path) in list_pngs(gen_dir)? {
        let stem = name.trim_end_matches(".png");
        let key = match stem.rsplit_once("_r") {
            Some((base, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => base,
            _ => stem,
        };
        out.entry(key.to_string()).or_default().push(path);
    }
    Ok(out)
}

/// Per-image KLD (first generated sample) and AKLD (mean over all samples) rows plus a mean row.
pub fn noise_report(clean_dir: &Path, real_dir: &Path, gen_dir: &Path, bins: usize) -> Result<String> {
    let cleans = list_pngs(clean_dir)?;
    if cleans.is_empty() {
        bail!("no PNG images in {}", clean_dir.display());
    }
    let generated = generated_by_stem(gen_dir)?;
    let mut csv = String::from("image_id,kld,akld,samples\n");
    let (mut sum_kld, mut sum_akld) = (0.0, 0.0);
    for (name, clean_path) in &cleans {
        let stem = name.trim_end_matches(".png");
        let clean = Image::load_png(clean_path)?;
        let real = Image::load_png(&real_dir.join(name))?.sub(&clean)?;
        let fakes = generated
            .get(stem)
            .with_context(|| format!("no generated image for {name} in {}", gen_dir.display()))?;
        let p = histogram(&real.data, bins)?;
        let mut klds = Vec::with_capacity(fakes.len());
        for f in fakes {
            let fake = Image::load_png(f)?;
            // generated images may be centre-cropped to a multiple of 8
            let (y0, x0) = ((clean.height - fake.height) / 2, (clean.width - fake.width) / 2);
            let residual = fake.sub(&clean.crop(y0, x0, fake.height, fake.width)?)?;
            klds.push(kld_histograms(&p, &histogram(&residual.data, bins)?)?);
        }
        let akld = klds.iter().sum::<f64>() / klds.len() as f64;
        sum_kld += klds[0];
        sum_akld += akld;
        csv.push_str(&format!("{stem},{:.6},{:.6},{}\n", klds[0], akld, klds.len()));
    }
    let n = cleans.len() as f64;
    csv.push_str(&format!("mean,{:.6},{:.6},\n", sum_kld / n, sum_akld / n));
    Ok(csv)
}

fn emit(csv: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn eval_noise(a: EvalNoiseArgs) -> Result<()> {
    let csv = noise_report(&a.clean_dir, &a.real_dir, &a.gen_dir, a.bins)?;
    emit(&csv, a.out.as_deref())
}

fn cmd_train_denoiser(a: TrainDenoiserArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    if let Some(k) = a.iterations {
        cfg.denoiser.iterations = k;
    }
    if let Some(m) = a.mix_ratio {
        cfg.denoiser.mix_ratio = m;
    }
    let real = a.real.as_deref().map(|r| load_dataset(&cfg, Some(r), "denoiser-real")).transpose()?;
    let synth = a.synth.as_deref().map(|r| load_dataset(&cfg, Some(r), "denoiser-synth")).transpose()?;
    train_denoiser(real.as_ref(), synth.as_ref(), &cfg, Some(&a.out), &mut log_line)?;
    log_line(&serde_json::json!({"stage": "denoiser", "event": "done", "checkpoint": a.out}));
    Ok(())
}

fn eval_denoiser(a: EvalDenoiserArgs) -> Result<()> {
    let cfg = RunConfig::default();
    let pairs: Vec<Pair> = load_dataset(&cfg, Some(&a.data), "eval")?.pairs;
    let report = match &a.ckpt {
        Some(dir) => {
            let model = Denoiser::load(dir)?;
            evaluate(&pairs, |img| model.denoise(img))?
        }
        None => evaluate(&pairs, |img| Ok(img.clone()))?,
    };
    let mut csv = report.to_csv();
    csv.push_str(&format!("mean,{:.6},{:.6}\n", report.mean_psnr(), report.mean_ssim()));
    log_line(&serde_json::json!({"stage": "eval-denoiser", "mean_psnr_db": report.mean_psnr(), "mean_ssim": report.mean_ssim()}));
    emit(&csv, a.out.as_deref())
}

/// `t,sigma,p,lambda` for `t = 1..=n`; `p` and `lambda` are empty on the last row, which
/// has no interval above it.
pub fn schedule_csv(cfg: &RunConfig, n: usize) -> Result<String> {
    let schedule = cfg.cm.schedule()?;
    let grid = schedule.grid(n)?;
    let probs = cfg.cm.sampler().probs(n, &schedule)?;
    let mut csv = String::from("t,sigma,p,lambda\n");
    for (i, s) in grid.iter().enumerate() {
        if i + 1 < n {
            let lambda = loss_weight(*s, grid[i + 1])?;
            csv.push_str(&format!("{},{:.17e},{:.17e},{:.17e}\n", i + 1, s, probs[i], lambda));
        } else {
            csv.push_str(&format!("{},{:.17e},,\n", i + 1, s));
        }
    }
    Ok(csv)
}
