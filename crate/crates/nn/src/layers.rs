//! Dense, convolutional and residual layers over channels-last tensors.

use candle_core::{Result, Tensor};

use crate::ops::conv_nhwc;
use crate::params::{Init, ParamStore};

/// Affine map on the last dimension; weight stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// PyTorch-style uniform init with bound `1/√in`.
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let b = 1.0 / (d_in as f64).sqrt();
        Self::with_init(ps, name, d_in, d_out, Init::Uniform(b), Init::Uniform(b))
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: ps.get_or_init(&format!("{name}.weight"), (d_in, d_out), w)?,
            bias: ps.get_or_init(&format!("{name}.bias"), d_out, b)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let (_, d_out) = self.weight.dims2()?;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = d_out;
        y.reshape(out_dims)
    }
}

/// "Same"-padded stride-1 `k×k` convolution; weight stored `(k·k·in) × out`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub k: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let b = 1.0 / ((k * k * c_in) as f64).sqrt();
        Self::with_init(ps, name, c_in, c_out, k, Init::Uniform(b), Init::Uniform(b))
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_init(ps, name, c_in, c_out, k, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        w: Init,
        b: Init,
    ) -> Result<Self> {
        if k % 2 == 0 {
            candle_core::bail!("conv {name}: kernel size must be odd, got {k}");
        }
        Ok(Self {
            k,
            weight: ps.get_or_init(&format!("{name}.weight"), (k * k * c_in, c_out), w)?,
            bias: ps.get_or_init(&format!("{name}.bias"), c_out, b)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(3)?;
        let (kc, _) = self.weight.dims2()?;
        if kc != self.k * self.k * c {
            candle_core::bail!("conv expects {} input channels, got {c}", kc / (self.k * self.k));
        }
        conv_nhwc(x, &self.weight, &self.bias, self.k)
    }
}

/// `x + conv(silu(conv(silu(x))))` with the second conv zero-initialized, so a fresh block
/// is the identity.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c, c, 3)?,
            conv2: Conv2d::zeros(ps, &format!("{name}.conv2"), c, c, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        x + self.conv2.forward(&h.silu()?)?
    }
}
