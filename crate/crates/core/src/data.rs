//! Paired datasets, keyed patch sampling and the synthetic toy benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng;

/// Aligned clean/noisy pair, both in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub clean: Image,
    pub noisy: Image,
}

impl Pair {
    pub fn residual(&self) -> Image {
        self.noisy.sub(&self.clean).expect("pairs are shape-checked on construction")
    }
}

/// In-memory paired dataset with a keyed crop sampler.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub seed: u64,
    /// Purpose tag separating this dataset's sampling stream from others with the same seed.
    pub tag: String,
}

/// A batch of aligned `patch×patch` crops.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub clean: Vec<Image>,
    pub noisy: Vec<Image>,
    /// Index into the dataset of each crop's source pair.
    pub sources: Vec<usize>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn residuals(&self) -> Vec<Image> {
        self.noisy
            .iter()
            .zip(&self.clean)
            .map(|(n, c)| n.sub(c).expect("batch crops are aligned"))
            .collect()
    }
}

impl PairedDataset {
    pub fn new(pairs: Vec<Pair>, seed: u64, tag: &str) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        for p in &pairs {
            p.clean.same_shape(&p.noisy, &format!("pair {}", p.id))?;
        }
        Ok(Self {
            pairs,
            seed,
            tag: tag.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Loads `root/<clean_dir>/*.png` paired by file name with `root/<noisy_dir>/*.png`.
    pub fn load(root: &Path, clean_dir: &str, noisy_dir: &str, seed: u64) -> Result<Self> {
        let clean_root = root.join(clean_dir);
        let noisy_root = root.join(noisy_dir);
        let clean = list_pngs(&clean_root)?;
        let noisy = list_pngs(&noisy_root)?;
        if clean.is_empty() && noisy.is_empty() {
            return Err(Error::Config(format!("dataset at {} is empty", root.display())));
        }
        for name in noisy.keys() {
            if !clean.contains_key(name) {
                return Err(Error::Contract(format!(
                    "unmatched noisy file {}",
                    noisy_root.join(name).display()
                )));
            }
        }
        let mut pairs = Vec::with_capacity(clean.len());
        for (name, clean_path) in &clean {
            let noisy_path = noisy.get(name).ok_or_else(|| {
                Error::Contract(format!("unmatched clean file {}", clean_path.display()))
            })?;
            let c = Image::load_png(clean_path)?;
            let n = Image::load_png(noisy_path)?;
            if c.shape() != n.shape() {
                return Err(Error::Contract(format!(
                    "pair {name}: clean {:?} vs noisy {:?}",
                    c.shape(),
                    n.shape()
                )));
            }
            let id = name.trim_end_matches(".png").to_string();
            pairs.push(Pair {
                id,
                clean: c,
                noisy: n,
            });
        }
        Self::new(pairs, seed, "dataset")
    }

    pub fn min_extent(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.clean.height.min(p.clean.width))
            .min()
            .unwrap_or(0)
    }

    /// Crops `batch` aligned patches; content is a pure function of `(seed, tag, iteration)`.
    pub fn sample_patch_batch(&self, batch: usize, patch: usize, iteration: u64) -> Result<PatchBatch> {
        if patch == 0 || patch > self.min_extent() {
            return Err(Error::Config(format!(
                "patch {patch} exceeds the smallest image extent {}",
                self.min_extent()
            )));
        }
        let mut s = rng::stream(self.seed, &format!("{}-patches", self.tag), iteration);
        let mut out = PatchBatch {
            clean: Vec::with_capacity(batch),
            noisy: Vec::with_capacity(batch),
            sources: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let i = s.random_range(0..self.pairs.len());
            let p = &self.pairs[i];
            let y = s.random_range(0..=p.clean.height - patch);
            let x = s.random_range(0..=p.clean.width - patch);
            out.clean.push(p.clean.crop(y, x, patch, patch)?);
            out.noisy.push(p.noisy.crop(y, x, patch, patch)?);
            out.sources.push(i);
        }
        Ok(out)
    }
}

/// PNG files of a directory keyed by file name, in sorted order.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let name = entry.file_name().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Synthetic noise models of the toy benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// i.i.d. `N(0, σ²)`.
    Gaussian { sigma: f64 },
    /// Signal-dependent `N(0, a·x + b)`.
    Heteroscedastic { a: f64, b: f64 },
    /// i.i.d. Gaussian filtered by a square kernel, rescaled to marginal std `sigma`.
    Correlated { sigma: f64, kernel: Vec<f64> },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            NoiseModel::Gaussian { sigma } => *sigma >= 0.0 && sigma.is_finite(),
            NoiseModel::Heteroscedastic { a, b } => *a >= 0.0 && *b >= 0.0 && a.is_finite() && b.is_finite(),
            NoiseModel::Correlated { sigma, kernel } => {
                let k = (kernel.len() as f64).sqrt() as usize;
                *sigma >= 0.0
                    && k * k == kernel.len()
                    && k % 2 == 1
                    && kernel.iter().all(|v| v.is_finite())
                    && kernel.iter().any(|v| *v != 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise model parameters: {self:?}")))
        }
    }

    /// Draws a noisy version of `clean` (unclamped); `gain` scales the noise std.
    pub fn apply(&self, clean: &Image, gain: f64, rng: &mut impl Rng) -> Image {
        let (h, w) = clean.shape();
        let n = clean.data.len();
        let mut eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if let NoiseModel::Correlated { kernel, .. } = self {
            eps = correlate(&eps, h, w, kernel);
        }
        let data = clean
            .data
            .iter()
            .zip(&eps)
            .map(|(x, e)| {
                let std = match self {
                    NoiseModel::Gaussian { sigma } | NoiseModel::Correlated { sigma, .. } => *sigma,
                    NoiseModel::Heteroscedastic { a, b } => (a * *x as f64 + b).max(0.0).sqrt(),
                };
                (*x as f64 + gain * std * e) as f32
            })
            .collect();
        Image {
            height: h,
            width: w,
            data,
        }
    }
}

/// Filters each channel of unit-variance white noise and renormalizes to unit variance.
fn correlate(eps: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = (kernel.len() as f64).sqrt() as usize;
    let r = (k / 2) as isize;
    let norm = kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = vec![0.0; eps.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for i in 0..k as isize {
                    for j in 0..k as isize {
                        let yy = crate::image::reflect101(y + i - r, h);
                        let xx = crate::image::reflect101(x + j - r, w);
                        acc += kernel[(i * k as isize + j) as usize] * eps[(yy * w + xx) * CHANNELS + c];
                    }
                }
                out[(y as usize * w + x as usize) * CHANNELS + c] = acc / norm;
            }
        }
    }
    out
}

/// Smooth gradient + random shapes + fine texture, clamped to `[0.15, 0.85]` so noise
/// rarely clips.
pub fn toy_clean_image(size: usize, rng: &mut impl Rng) -> Image {
    let mut img = Image::zeros(size, size);
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let gy: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let gx: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            for c in 0..CHANNELS {
                let v = base[c] + gy[c] * (y as f64 / s - 0.5) + gx[c] * (x as f64 / s - 0.5);
                let i = img.idx(y, x, c);
                img.data[i] = v as f32;
            }
        }
    }
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let rad = rng.random_range(0.08..0.3) * s;
        let color: [f64; 3] = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
        let disk = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disk {
                    dy * dy + dx * dx <= rad * rad
                } else {
                    dy.abs() <= rad && dx.abs() <= rad * 0.7
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        let i = img.idx(y, x, c);
                        img.data[i] = *col as f32;
                    }
                }
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let amp = rng.random_range(0.01..0.05);
    for y in 0..size {
        for x in 0..size {
            let t = amp * ((fy * y as f64).sin() * (fx * x as f64).cos());
            for c in 0..CHANNELS {
                let i = img.idx(y, x, c);
                img.data[i] = (img.data[i] as f64 + t).clamp(0.15, 0.85) as f32;
            }
        }
    }
    img
}

/// Ground-truth description written next to a toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub seed: u64,
    pub size: usize,
    pub model: NoiseModel,
    /// Per-image noise-std multiplier, keyed by image id.
    pub gains: BTreeMap<String, f64>,
}

pub const TOY_MANIFEST: &str = "toy.json";

/// Generates `n` toy pairs in memory; image `i` uses gain `levels[i % levels.len()]`.
/// Noisy images are clamped to `[0, 1]` and quantized to 8 bits, as if stored as PNG.
pub fn toy_pairs(n: usize, size: usize, model: &NoiseModel, levels: &[f64], seed: u64) -> Result<(Vec<Pair>, ToyManifest)> {
    model.validate()?;
    if n == 0 || size == 0 {
        return Err(Error::Config("toy dataset needs n > 0 and size > 0".into()));
    }
    if levels.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(Error::Config("gain levels must be finite and non-negative".into()));
    }
    let levels = if levels.is_empty() { &[1.0][..] } else { levels };
    let mut pairs = Vec::with_capacity(n);
    let mut gains = BTreeMap::new();
    for i in 0..n {
        let id = format!("{i:04}");
        let gain = levels[i % levels.len()];
        let clean = quantized(&toy_clean_image(size, &mut rng::stream(seed, "toy-clean", i as u64)));
        let noisy = quantized(&model.apply(&clean, gain, &mut rng::stream(seed, "toy-noise", i as u64)));
        gains.insert(id.clone(), gain);
        pairs.push(Pair { id, clean, noisy });
    }
    let manifest = ToyManifest {
        seed,
        size,
        model: model.clone(),
        gains,
    };
    Ok((pairs, manifest))
}

fn quantized(img: &Image) -> Image {
    Image {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|v| crate::image::quantize(*v) as f32 / 255.0).collect(),
    }
}

/// Writes a toy dataset as `out/clean/*.png`, `out/noisy/*.png` and `out/toy.json`.
pub fn make_toy_dataset(
    n: usize,
    size: usize,
    model: &NoiseModel,
    levels: &[f64],
    seed: u64,
    out_dir: &Path,
) -> Result<ToyManifest> {
    let (pairs, manifest) = toy_pairs(n, size, model, levels, seed)?;
    write_pairs(&pairs, out_dir, "clean", "noisy")?;
    let path = out_dir.join(TOY_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn write_pairs(pairs: &[Pair], out_dir: &Path, clean_dir: &str, noisy_dir: &str) -> Result<()> {
    for d in [clean_dir, noisy_dir] {
        let p = out_dir.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for p in pairs {
        p.clean.save_png(&out_dir.join(clean_dir).join(format!("{}.png", p.id)))?;
        p.noisy.save_png(&out_dir.join(noisy_dir).join(format!("{}.png", p.id)))?;
    }
    Ok(())
}

pub fn load_toy_manifest(dir: &Path) -> Result<ToyManifest> {
    let path = dir.join(TOY_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moment() {
        let model = NoiseModel::Gaussian { sigma: 0.05 };
        let (pairs, _) = toy_pairs(8, 64, &model, &[], 1).unwrap();
        let res: Vec<f64> = pairs.iter().flat_map(|p| p.residual().data).map(|v| v as f64).collect();
        let m = res.iter().sum::<f64>() / res.len() as f64;
        let std = (res.iter().map(|v| (v - m).powi(2)).sum::<f64>() / res.len() as f64).sqrt();
        assert!((std / 0.05 - 1.0).abs() < 0.02, "std={std}");
    }

    #[test]
    fn heteroscedastic_regression_recovers_a() {
        let (a, b) = (0.01, 0.0004);
        let model = NoiseModel::Heteroscedastic { a, b };
        let (pairs, _) = toy_pairs(8, 64, &model, &[], 2).unwrap();
        // bin residual variance by clean intensity, then least-squares fit var = a·x + b
        let mut bins: BTreeMap<u8, (f64, f64, usize)> = BTreeMap::new();
        for p in &pairs {
            for (c, n) in p.clean.data.iter().zip(&p.noisy.data) {
                let e = bins.entry((c * 255.0).round() as u8).or_default();
                let r = (n - c) as f64;
                e.0 += r;
                e.1 += r * r;
                e.2 += 1;
            }
        }
        let pts: Vec<(f64, f64, f64)> = bins
            .iter()
            .filter(|(_, v)| v.2 >= 50)
            .map(|(k, v)| {
                let m = v.0 / v.2 as f64;
                (*k as f64 / 255.0, v.1 / v.2 as f64 - m * m, v.2 as f64)
            })
            .collect();
        let wsum: f64 = pts.iter().map(|p| p.2).sum();
        let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / wsum;
        let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / wsum;
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
        let a_hat = sxy / sxx;
        assert!((a_hat / a - 1.0).abs() < 0.1, "a_hat={a_hat}");
    }

    #[test]
    fn correlated_noise_has_target_std_and_correlation() {
        let model = NoiseModel::Correlated { sigma: 0.04, kernel: vec![1.0; 9] };
        let (pairs, _) = toy_pairs(4, 64, &model, &[], 3).unwrap();
        let r = pairs[0].residual();
        assert!((r.std() / 0.04 - 1.0).abs() < 0.1);
        let cm = crate::noisestats::local_correlation_map(&r, 3, Default::default()).unwrap();
        let mean_nb = cm.values.chunks(9).map(|g| g[5]).sum::<f64>() / (64.0 * 64.0);
        assert!(mean_nb > 0.3, "neighbour correlation {mean_nb}");
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(NoiseModel::Gaussian { sigma: -1.0 }.validate().is_err());
        assert!(NoiseModel::Heteroscedastic { a: -0.1, b: 0.0 }.validate().is_err());
        assert!(NoiseModel::Correlated { sigma: 0.1, kernel: vec![1.0; 4] }.validate().is_err());
        assert!(matches!(
            toy_pairs(2, 8, &NoiseModel::Gaussian { sigma: f64::NAN }, &[], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toy_is_deterministic_and_gains_recorded() {
        let model = NoiseModel::Gaussian { sigma: 0.05 };
        let (a, ma) = toy_pairs(4, 16, &model, &[0.5, 1.5], 9).unwrap();
        let (b, mb) = toy_pairs(4, 16, &model, &[0.5, 1.5], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(ma.gains["0001"], 1.5);
        assert!(a[1].residual().std() > 2.0 * a[0].residual().std());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = NoiseModel::Gaussian { sigma: 0.05 };
        make_toy_dataset(5, 16, &model, &[], 4, dir.path()).unwrap();
        let ds = PairedDataset::load(dir.path(), "clean", "noisy", 0).unwrap();
        assert_eq!(ds.len(), 5);
        let (pairs, _) = toy_pairs(5, 16, &model, &[], 4).unwrap();
        assert_eq!(ds.pairs, pairs);
        assert_eq!(load_toy_manifest(dir.path()).unwrap().size, 16);
    }
}
