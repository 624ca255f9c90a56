//! Interleaved RGB float images in `[0, 1]` and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// `H×W×3` row-major, channel-interleaved float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Contract(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width * CHANNELS],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    pub fn same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self − other`, e.g. the noise residual `noisy − clean`.
    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.same_shape(other, "image difference")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Image {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.same_shape(other, "image sum")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Image {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn clamp01(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Index(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let s = self.idx(y, x0, 0);
            data.extend_from_slice(&self.data[s..s + w * CHANNELS]);
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }

    /// Centre-crops or reflect-tiles to exactly `h×w`.
    pub fn fit_to(&self, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        let oy = self.height.saturating_sub(h) / 2;
        let ox = self.width.saturating_sub(w) / 2;
        for y in 0..h {
            let sy = reflect_tile(y + oy, self.height);
            for x in 0..w {
                let sx = reflect_tile(x + ox, self.width);
                let s = self.idx(sy, sx, 0);
                data.extend_from_slice(&self.data[s..s + CHANNELS]);
            }
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }

    /// One of the 8 dihedral transforms (`k & 3` quarter turns, then a horizontal flip if `k & 4`).
    pub fn dihedral(&self, k: u8) -> Image {
        let rot = k & 3;
        let flip = k & 4 != 0;
        let (h, w) = if rot % 2 == 1 {
            (self.width, self.height)
        } else {
            (self.height, self.width)
        };
        let mut out = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                // inverse-map output (y, xx) to source coordinates
                let (sy, sx) = match rot {
                    0 => (y, xx),
                    1 => (xx, self.width - 1 - y),
                    2 => (self.height - 1 - y, self.width - 1 - xx),
                    _ => (self.height - 1 - xx, y),
                };
                let d = out.idx(y, x, 0);
                let s = self.idx(sy, sx, 0);
                out.data[d..d + CHANNELS].copy_from_slice(&self.data[s..s + CHANNELS]);
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>()
            / self.data.len().max(1) as f64;
        var.sqrt()
    }

    /// Channel-planar (`3×H×W`) copy, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * CHANNELS];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Image> {
        let hw = height * width;
        if chw.len() != hw * CHANNELS {
            return Err(Error::Contract(format!(
                "planar image {height}x{width} needs {} values, got {}",
                hw * CHANNELS,
                chw.len()
            )));
        }
        let mut data = vec![0.0; hw * CHANNELS];
        for i in 0..hw {
            for c in 0..CHANNELS {
                data[i * CHANNELS + c] = chw[c * hw + i];
            }
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Contract("image buffer size".into()))?;
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Raw little-endian `f32` sidecar (`height`, `width` as u32 header) preserving full precision.
    pub fn save_f32(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + self.data.len() * 4);
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_f32(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            msg: "truncated float image".into(),
        };
        if bytes.len() < 8 {
            return Err(bad());
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + h * w * CHANNELS * 4 {
            return Err(bad());
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Image::new(h, w, data)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reflect-101 index for an arbitrary (possibly far out of range) coordinate.
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn reflect_tile(i: usize, n: usize) -> usize {
    reflect101(i as isize, n)
}
