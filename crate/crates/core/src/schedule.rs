//! Closed-form consistency-training schedule math.
//!
//! Everything here is computed in `f64` regardless of the precision the networks run in.

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Karras-style noise grid `σ_1 < … < σ_N` between `sigma_min` and `sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Curvature exponent; larger values concentrate steps at low noise.
    pub tau: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            tau: 7.0,
        }
    }
}

impl SigmaSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, tau: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            tau,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma schedule needs 0 < sigma_min < sigma_max, got {} / {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// `σ_t` for `t ∈ 1..=n`. The endpoints are returned exactly.
    pub fn sigma_at(&self, t: usize, n: usize) -> Result<f64> {
        if n < 2 {
            return Err(Error::Index(format!("grid needs at least 2 steps, got {n}")));
        }
        if t < 1 || t > n {
            return Err(Error::Index(format!("step {t} outside 1..={n}")));
        }
        if t == 1 {
            return Ok(self.sigma_min);
        }
        if t == n {
            return Ok(self.sigma_max);
        }
        let inv = 1.0 / self.tau;
        let lo = self.sigma_min.powf(inv);
        let hi = self.sigma_max.powf(inv);
        let frac = (t - 1) as f64 / (n - 1) as f64;
        Ok((lo + frac * (hi - lo)).powf(self.tau))
    }

    /// The whole grid `[σ_1, …, σ_n]`.
    pub fn grid(&self, n: usize) -> Result<Vec<f64>> {
        (1..=n).map(|t| self.sigma_at(t, n)).collect()
    }
}

/// Discretization curriculum `C(k) = min(s0 · 2^(k/K'), s1) + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub s0: usize,
    pub s1: usize,
    pub total_iters: usize,
    /// Floor `k/K'` before exponentiating (iCT-style stair steps).
    #[serde(default)]
    pub stair: bool,
}

impl Curriculum {
    pub fn new(s0: usize, s1: usize, total_iters: usize) -> Result<Self> {
        let c = Self {
            s0,
            s1,
            total_iters,
            stair: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s0 < 1 || self.s1 < self.s0 {
            return Err(Error::Config(format!(
                "curriculum needs 1 <= s0 <= s1, got s0={} s1={}",
                self.s0, self.s1
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("curriculum needs K > 0".into()));
        }
        if self.stage_len() == 0 {
            return Err(Error::Config(format!(
                "K={} too small for a curriculum from {} to {} steps",
                self.total_iters, self.s0, self.s1
            )));
        }
        Ok(())
    }

    /// `K' = ⌊K / (log2(s1/s0) + 1)⌋`.
    pub fn stage_len(&self) -> usize {
        let stages = (self.s1 as f64 / self.s0 as f64).log2() + 1.0;
        (self.total_iters as f64 / stages).floor() as usize
    }

    /// Number of noise levels `N = C(k)` at iteration `k`.
    pub fn steps(&self, k: usize) -> Result<usize> {
        self.validate()?;
        if k > self.total_iters {
            return Err(Error::Index(format!(
                "iteration {k} beyond K={}",
                self.total_iters
            )));
        }
        let mut e = k as f64 / self.stage_len() as f64;
        if self.stair {
            e = e.floor();
        }
        let grown = self.s0 as f64 * e.exp2();
        let capped = grown.min(self.s1 as f64).floor() as usize;
        Ok(capped + 1)
    }
}

/// Lognormal-shaped distribution over grid intervals `t ∈ 1..N-1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepSampler {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self {
            p_mean: -1.1,
            p_std: 2.0,
        }
    }
}

impl TimestepSampler {
    /// Probabilities `p(t)` for `t = 1..=n-1` (index 0 holds `t = 1`).
    pub fn probs(&self, n: usize, schedule: &SigmaSchedule) -> Result<Vec<f64>> {
        if !(self.p_std > 0.0) {
            return Err(Error::Config(format!("p_std must be positive, got {}", self.p_std)));
        }
        let grid = schedule.grid(n)?;
        let denom = std::f64::consts::SQRT_2 * self.p_std;
        let cdf: Vec<f64> = grid
            .iter()
            .map(|s| erf((s.ln() - self.p_mean) / denom))
            .collect();
        let raw: Vec<f64> = cdf.windows(2).map(|w| w[1] - w[0]).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("timestep distribution has no mass on the grid".into()));
        }
        Ok(raw.into_iter().map(|p| p / total).collect())
    }

    /// Draws a grid interval `t ∈ 1..=n-1`.
    pub fn sample(&self, n: usize, schedule: &SigmaSchedule, rng: &mut impl Rng) -> Result<usize> {
        let dist = self.distribution(n, schedule)?;
        Ok(dist.sample(rng) + 1)
    }

    /// Reusable weighted distribution; samples are zero-based (`t - 1`).
    pub fn distribution(&self, n: usize, schedule: &SigmaSchedule) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(self.probs(n, schedule)?)
            .map_err(|e| Error::Config(format!("timestep weights: {e}")))
    }
}

/// EDM boundary-respecting preconditioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmCoefficients {
    pub sigma_data: f64,
}

impl Default for EdmCoefficients {
    fn default() -> Self {
        Self { sigma_data: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
}

impl EdmCoefficients {
    pub fn coeffs(&self, sigma_t: f64, sigma_0: f64) -> Preconditioning {
        let sd2 = self.sigma_data * self.sigma_data;
        let norm = (sd2 + sigma_t * sigma_t).sqrt();
        let gap = sigma_t - sigma_0;
        Preconditioning {
            c_in: 1.0 / norm,
            c_skip: sd2 / (gap * gap + sd2),
            c_out: self.sigma_data * gap / norm,
        }
    }
}

/// Pseudo-Huber constant `c = 0.00054·√m`.
pub fn pseudo_huber_c(m: usize) -> f64 {
    0.00054 * (m as f64).sqrt()
}

/// `√(‖x−y‖² + c²) − c` with `c = 0.00054·√m`, `m` the element count.
pub fn pseudo_huber(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "pseudo_huber shape mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let c = pseudo_huber_c(x.len());
    // (sq + c²) − c² over (√(sq+c²) + c) avoids cancellation for tiny residuals
    Ok(sq / ((sq + c * c).sqrt() + c))
}

/// `λ(σ_t) = 1 / (σ_{t+1} − σ_t)`.
pub fn loss_weight(sigma_t: f64, sigma_next: f64) -> Result<f64> {
    if !(sigma_next > sigma_t) {
        return Err(Error::Contract(format!(
            "loss weight needs sigma_next > sigma_t, got {sigma_t} / {sigma_next}"
        )));
    }
    Ok(1.0 / (sigma_next - sigma_t))
}

/// Variance-exploding forward process `x_t = x_0 + σ_t·ε`.
pub fn add_noise(x0: &[f32], sigma_t: f64, eps: &[f32]) -> Result<Vec<f32>> {
    if x0.len() != eps.len() {
        return Err(Error::Contract(format!(
            "add_noise shape mismatch: {} vs {}",
            x0.len(),
            eps.len()
        )));
    }
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| (*x as f64 + sigma_t * *e as f64) as f32)
        .collect())
}
