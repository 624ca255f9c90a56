//! Distribution and fidelity metrics: KLD, AKLD, PSNR, SSIM.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Histogram resolution used for KLD, matching 8-bit quantization granularity.
pub const KLD_BINS: usize = 256;
/// Per-bin additive smoothing applied before renormalization.
pub const KLD_EPS: f64 = 1e-10;

/// Equal-width histogram over `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHistogram {
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl NoiseHistogram {
    /// Builds a histogram directly from probabilities (edges evenly spaced on `[−1, 1]`).
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        let bins = probabilities.len();
        if bins == 0 || probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Contract("histogram needs non-negative probabilities".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("histogram sums to {total}, not 1")));
        }
        Ok(Self {
            bin_edges: edges(bins),
            probabilities,
        })
    }

    fn smoothed(&self) -> Vec<f64> {
        let total: f64 = self.probabilities.iter().map(|p| p + KLD_EPS).sum();
        self.probabilities.iter().map(|p| (p + KLD_EPS) / total).collect()
    }
}

fn edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect()
}

/// Pooled histogram of all values; values outside `[−1, 1]` fall into the end bins.
pub fn histogram<'a>(values: impl IntoIterator<Item = &'a f32>, bins: usize) -> Result<NoiseHistogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0u64; bins];
    let mut n = 0u64;
    for v in values {
        if !v.is_finite() {
            return Err(Error::Contract("non-finite residual value".into()));
        }
        let pos = ((*v as f64 + 1.0) / 2.0 * bins as f64).floor();
        counts[(pos.max(0.0) as usize).min(bins - 1)] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("histogram of an empty set".into()));
    }
    Ok(NoiseHistogram {
        bin_edges: edges(bins),
        probabilities: counts.into_iter().map(|c| c as f64 / n as f64).collect(),
    })
}

/// `D_KL(P ‖ Q)` in nats between two ε-smoothed histograms.
pub fn kld_histograms(p: &NoiseHistogram, q: &NoiseHistogram) -> Result<f64> {
    if p.probabilities.len() != q.probabilities.len() {
        return Err(Error::Contract("histograms have different bin counts".into()));
    }
    let (ps, qs) = (p.smoothed(), q.smoothed());
    Ok(ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

pub fn kld_values(real: &[f32], fake: &[f32], bins: usize) -> Result<f64> {
    kld_histograms(&histogram(real, bins)?, &histogram(fake, bins)?)
}

/// KLD between the pooled value distributions of two residual sets.
pub fn kld(real: &[Image], fake: &[Image], bins: usize) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Contract("kld needs non-empty residual sets".into()));
    }
    let p = histogram(real.iter().flat_map(|r| r.data.iter()), bins)?;
    let q = histogram(fake.iter().flat_map(|r| r.data.iter()), bins)?;
    kld_histograms(&p, &q)
}

/// Mean KLD between the real residual and `n_samples` generated residuals of one image.
pub fn akld(
    clean: &Image,
    real_noisy: &Image,
    mut gen: impl FnMut(&Image) -> Result<Image>,
    n_samples: usize,
    bins: usize,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Contract("akld needs n_samples >= 1".into()));
    }
    let real = real_noisy.sub(clean)?;
    let p = histogram(&real.data, bins)?;
    let mut total = 0.0;
    for _ in 0..n_samples {
        let fake = gen(clean)?;
        fake.same_shape(clean, "generated image")?;
        let q = histogram(&fake.sub(clean)?.data, bins)?;
        total += kld_histograms(&p, &q)?;
    }
    Ok(total / n_samples as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range; `+∞` for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b, "psnr")?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-region Gaussian filter of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity (Gaussian 11×11 window, σ=1.5, K1=0.01, K2=0.03, L=1),
/// averaged over the valid region and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    let (h, w) = a.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(CHANNELS).map(|v| *v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(CHANNELS).map(|v| *v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&xx, h, w, &g);
        let syy = filter_valid(&yy, h, w, &g);
        let sxy = filter_valid(&xy, h, w, &g);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / CHANNELS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut s = rng::stream(seed, "test-metric-image", 0);
        Image::new(h, w, rng::uniform_vec(&mut s, h * w * 3, 0.0, 1.0)).unwrap()
    }

    /// Per-window SSIM written directly from the definition, as a reference.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let g = gaussian_window();
        let (h, w) = a.shape();
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut n = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            ux += wt * a.at(y0 + i, x0 + j, c) as f64;
                            uy += wt * b.at(y0 + i, x0 + j, c) as f64;
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            let dx = a.at(y0 + i, x0 + j, c) as f64 - ux;
                            let dy = b.at(y0 + i, x0 + j, c) as f64 - uy;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                    }
                    acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / 3.0
    }

    fn psnr_reference(a: &Image, b: &Image) -> f64 {
        let mut se = 0.0;
        for y in 0..a.height {
            for x in 0..a.width {
                for c in 0..3 {
                    se += (a.at(y, x, c) as f64 - b.at(y, x, c) as f64).powi(2);
                }
            }
        }
        10.0 * (1.0 / (se / (a.height * a.width * 3) as f64)).log10()
    }

    #[test]
    fn kld_two_bin_examples() {
        let p = NoiseHistogram::from_probabilities(vec![0.5, 0.5]).unwrap();
        let q = NoiseHistogram::from_probabilities(vec![0.25, 0.75]).unwrap();
        let fwd = kld_histograms(&p, &q).unwrap();
        let rev = kld_histograms(&q, &p).unwrap();
        let fwd_exact = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let rev_exact = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((fwd - fwd_exact).abs() < 1e-9 && (fwd - 0.14384).abs() < 1e-5);
        assert!((rev - rev_exact).abs() < 1e-9 && (rev - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kld_identical_and_empty() {
        let a = vec![random_image(1, 8, 8).sub(&random_image(2, 8, 8)).unwrap()];
        assert!(kld(&a, &a, KLD_BINS).unwrap() < 1e-9);
        assert!(matches!(kld(&[], &a, KLD_BINS), Err(Error::Contract(_))));
    }

    #[test]
    fn kld_non_negative_and_zero_iff_equal() {
        let a: Vec<f32> = (0..1000).map(|i| ((i % 17) as f32 - 8.0) / 20.0).collect();
        let b: Vec<f32> = (0..1000).map(|i| ((i % 13) as f32 - 6.0) / 20.0).collect();
        assert!(kld_values(&a, &b, 64).unwrap() > 0.0);
        assert!(kld_values(&b, &a, 64).unwrap() > 0.0);
        assert_eq!(kld_values(&a, &a, 64).unwrap(), 0.0);
    }

    #[test]
    fn histogram_edges_and_mass() {
        let h = histogram(&[-1.0, 1.0, 0.0, 5.0, -7.0], 4).unwrap();
        assert_eq!(h.bin_edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(h.probabilities, vec![0.4, 0.0, 0.2, 0.4]);
    }

    #[test]
    fn akld_examples() {
        let clean = random_image(3, 16, 16);
        let noisy = random_image(4, 16, 16);
        let replay = akld(&clean, &noisy, |_| Ok(noisy.clone()), 10, KLD_BINS).unwrap();
        assert!(replay < 1e-9);
        let other = random_image(5, 16, 16);
        let one = akld(&clean, &noisy, |_| Ok(other.clone()), 1, KLD_BINS).unwrap();
        let single = kld(&[noisy.sub(&clean).unwrap()], &[other.sub(&clean).unwrap()], KLD_BINS).unwrap();
        assert_eq!(one, single);
        let ten = akld(&clean, &noisy, |_| Ok(other.clone()), 10, KLD_BINS).unwrap();
        assert!((ten - one).abs() < 1e-12);
        let bad = akld(&clean, &noisy, |_| Ok(Image::zeros(8, 8)), 1, KLD_BINS);
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn psnr_ssim_examples() {
        let a = random_image(6, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let u = Image::filled(12, 12, 0.5);
        let v = Image::filled(12, 12, 0.6);
        assert!((psnr(&u, &v).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&u, &Image::zeros(12, 13)).is_err());
        assert!(ssim(&u, &Image::zeros(12, 13)).is_err());
    }

    #[test]
    fn metrics_match_reference() {
        for seed in 0..3 {
            let a = random_image(10 + seed, 20, 17);
            let b = random_image(20 + seed, 20, 17);
            assert!((psnr(&a, &b).unwrap() - psnr_reference(&a, &b)).abs() < 1e-4);
            let s = ssim(&a, &b).unwrap();
            assert!((s - ssim_reference(&a, &b)).abs() < 1e-4);
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
