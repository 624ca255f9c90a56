//! Local Pearson correlation maps of noise residuals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect101, Image, CHANNELS};

/// Variance below which a window is treated as degenerate (coefficient 0).
pub const ZERO_VARIANCE: f64 = 1e-12;

/// How the three residual channels are reduced before correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Correlate the channel-mean plane.
    #[default]
    ChannelMean,
    /// Correlate each channel separately and average the three maps.
    PerChannel,
}

/// `H×W×ρ²` map; channel `j = a·ρ + b` holds the correlation with offset `(a−r, b−r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub height: usize,
    pub width: usize,
    pub rho: usize,
    /// Pixel-major: `values[(y·W + x)·ρ² + j]`.
    pub values: Vec<f64>,
}

impl CorrelationMap {
    pub fn channels(&self) -> usize {
        self.rho * self.rho
    }

    pub fn at(&self, y: usize, x: usize, j: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels() + j]
    }

    pub fn center_channel(&self) -> usize {
        (self.channels() - 1) / 2
    }
}

pub fn channel_mean_plane(n: &Image) -> Vec<f64> {
    n.data
        .chunks_exact(CHANNELS)
        .map(|px| px.iter().map(|v| *v as f64).sum::<f64>() / CHANNELS as f64)
        .collect()
}

fn validate_rho(rho: usize, h: usize, w: usize) -> Result<()> {
    if rho % 2 == 0 || rho < 3 || rho > h.min(w) {
        return Err(Error::Config(format!(
            "correlation window must be odd with 3 <= rho <= min(H, W) = {}, got {rho}",
            h.min(w)
        )));
    }
    Ok(())
}

pub fn local_correlation_map(n: &Image, rho: usize, mode: CorrelationMode) -> Result<CorrelationMap> {
    if n.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("noise residual has non-finite entries".into()));
    }
    match mode {
        CorrelationMode::ChannelMean => correlation_plane(&channel_mean_plane(n), n.height, n.width, rho),
        CorrelationMode::PerChannel => {
            let mut acc: Option<CorrelationMap> = None;
            for c in 0..CHANNELS {
                let plane: Vec<f64> = n.data.iter().skip(c).step_by(CHANNELS).map(|v| *v as f64).collect();
                let m = correlation_plane(&plane, n.height, n.width, rho)?;
                match acc.as_mut() {
                    None => acc = Some(m),
                    Some(a) => a.values.iter_mut().zip(&m.values).for_each(|(x, y)| *x += y),
                }
            }
            let mut out = acc.expect("three channels");
            out.values.iter_mut().for_each(|v| *v /= CHANNELS as f64);
            Ok(out)
        }
    }
}

/// Correlation map of a single `h×w` plane with reflect-101 borders.
///
/// For pixel `p` and offset `d`, the coefficient correlates `v(q)` with `v(q+d)` over the
/// `ρ×ρ` window of positions `q` centred on `p`. Window sums come from separable box filters
/// over a plane padded by `2r`, so the cost is `O(H·W·ρ²)`.
pub fn correlation_plane(plane: &[f64], h: usize, w: usize, rho: usize) -> Result<CorrelationMap> {
    if plane.len() != h * w {
        return Err(Error::Contract(format!(
            "plane of {} values is not {h}x{w}",
            plane.len()
        )));
    }
    validate_rho(rho, h, w)?;
    let r = rho / 2;
    let pad = 2 * r;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = reflect101(y as isize - pad as isize, h);
        for x in 0..pw {
            let sx = reflect101(x as isize - pad as isize, w);
            padded[y * pw + x] = plane[sy * w + sx];
        }
    }

    // Window sums indexed by the window's top-left corner in padded coordinates.
    let sw = pw - 2 * r;
    let s1 = box_sum(&padded, ph, pw, rho);
    let sq: Vec<f64> = padded.iter().map(|v| v * v).collect();
    let s2 = box_sum(&sq, ph, pw, rho);

    let n = (rho * rho) as f64;
    let k = rho * rho;
    let mut values = vec![0.0; h * w * k];
    let mut prod = vec![0.0; ph * pw];
    for a in 0..rho {
        for b in 0..rho {
            let (dy, dx) = (a as isize - r as isize, b as isize - r as isize);
            let j = a * rho + b;
            // product v(q)·v(q+d) where both stay inside the padded plane
            prod.iter_mut().for_each(|v| *v = 0.0);
            for y in r..ph - r {
                let yy = (y as isize + dy) as usize;
                for x in r..pw - r {
                    let xx = (x as isize + dx) as usize;
                    prod[y * pw + x] = padded[y * pw + x] * padded[yy * pw + xx];
                }
            }
            let sxy = box_sum(&prod, ph, pw, rho);
            for y in 0..h {
                // window centre for image row y sits at padded row y + pad → sums index y + pad − r
                let cy = y + pad - r;
                let ny = (cy as isize + dy) as usize;
                for x in 0..w {
                    let cx = x + pad - r;
                    let nx = (cx as isize + dx) as usize;
                    let sx = s1[cy * sw + cx];
                    let sxx = s2[cy * sw + cx];
                    let sy = s1[ny * sw + nx];
                    let syy = s2[ny * sw + nx];
                    let cov = sxy[cy * sw + cx] / n - sx * sy / (n * n);
                    let vx = sxx / n - sx * sx / (n * n);
                    let vy = syy / n - sy * sy / (n * n);
                    let c = if vx < ZERO_VARIANCE || vy < ZERO_VARIANCE {
                        0.0
                    } else if j == (k - 1) / 2 {
                        1.0
                    } else {
                        (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0)
                    };
                    values[(y * w + x) * k + j] = c;
                }
            }
        }
    }
    Ok(CorrelationMap {
        height: h,
        width: w,
        rho,
        values,
    })
}

/// Sums over every fully-contained `k×k` window; output is `(h−k+1)×(w−k+1)`.
fn box_sum(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        // direct summation per window keeps the error independent of the image size
        for x in 0..ow {
            rows[y * ow + x] = row[x..x + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Row-wise then column-wise means of each pixel's `ρ×ρ` channel grid: `H×W×2ρ`, pixel-major.
pub fn rowcol_average(cm: &CorrelationMap) -> Vec<f64> {
    let rho = cm.rho;
    let k = rho * rho;
    let mut out = vec![0.0; cm.height * cm.width * 2 * rho];
    for (px, grid) in cm.values.chunks_exact(k).enumerate() {
        let o = &mut out[px * 2 * rho..(px + 1) * 2 * rho];
        for a in 0..rho {
            for b in 0..rho {
                let v = grid[a * rho + b];
                o[a] += v;
                o[rho + b] += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= rho as f64);
    }
    out
}
