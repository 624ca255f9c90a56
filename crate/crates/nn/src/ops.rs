//! Tensor building blocks on channels-last (`B×H×W×C`) tensors.
//!
//! Convolutions lower to an im2col custom op followed by a dense matmul; candle's own CPU
//! conv kernels (and especially their backward through `conv_transpose2d`) are an order of
//! magnitude slower on the small shapes used here.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Result, Shape,
    Tensor, WithDType, D,
};

/// Gathers every `k×k` zero-padded ("same") neighbourhood of a `B×H×W×C` tensor into a
/// `B×H×W×(k·k·C)` tensor ordered `(dy, dx, c)`.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub k: usize,
}

/// Adjoint of [`Im2Col`]: scatters-adds patch columns back onto the image grid.
#[derive(Debug, Clone, Copy)]
pub struct Col2Im {
    pub k: usize,
}

fn dims4(layout: &Layout, op: &str) -> Result<(usize, usize, usize, usize)> {
    match layout.shape().dims() {
        &[b, h, w, c] => Ok((b, h, w, c)),
        d => candle_core::bail!("{op} expects a rank-4 tensor, got {d:?}"),
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((s, e)) => Ok(&data[s..e]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

fn im2col<T: WithDType>(src: &[T], (b, h, w, c): (usize, usize, usize, usize), k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let kc = k * k * c;
    let mut out = vec![T::zero(); b * h * w * kc];
    for bi in 0..b {
        let img = &src[bi * h * w * c..(bi + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let base = ((bi * h + y) * w + x) * kc;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * c;
                        let d = base + (dy * k + dx) * c;
                        out[d..d + c].copy_from_slice(&img[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(src: &[T], (b, h, w, kc): (usize, usize, usize, usize), k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let c = kc / (k * k);
    let mut out = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        let img = &mut out[bi * h * w * c..(bi + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let base = ((bi * h + y) * w + x) * kc;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = (sy as usize * w + sx as usize) * c;
                        let s = base + (dy * k + dx) * c;
                        for (o, v) in img[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims4(layout, self.name())?;
        let shape = Shape::from((b, h, w, self.k * self.k * c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout, self.name())?, (b, h, w, c), self.k)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout, self.name())?, (b, h, w, c), self.k)),
            s => candle_core::bail!("{} does not support {:?}", self.name(), s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im { k: self.k })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, kc) = dims4(layout, self.name())?;
        if kc % (self.k * self.k) != 0 {
            candle_core::bail!("{}: {kc} columns not divisible by k*k", self.name());
        }
        let shape = Shape::from((b, h, w, kc / (self.k * self.k)));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout, self.name())?, (b, h, w, kc), self.k)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout, self.name())?, (b, h, w, kc), self.k)),
            s => candle_core::bail!("{} does not support {:?}", self.name(), s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col { k: self.k })?))
    }
}

pub fn im2col_nhwc(x: &Tensor, k: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { k })
}

/// Fused "same" convolution `y = im2col(x)·W + b` on `(x: B×H×W×C, W: (k·k·C)×O, b: O)`.
///
/// The patch matrix lives only inside the forward and backward kernels, so autodiff never
/// materializes (or accumulates gradients for) the `k²`-times larger intermediate.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub k: usize,
}

fn conv_fwd<T: WithDType>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    w: &[T],
    bias: &[T],
    k: usize,
) -> Result<Vec<T>> {
    let (b, h, wd, c) = dims;
    let n = b * h * wd;
    let kc = k * k * c;
    let co = bias.len();
    let cols = if k == 1 { x.to_vec() } else { im2col(x, dims, k) };
    let cols = Tensor::from_vec(cols, (n, kc), &Device::Cpu)?;
    let wt = Tensor::from_slice(w, (kc, co), &Device::Cpu)?;
    let bt = Tensor::from_slice(bias, co, &Device::Cpu)?;
    cols.matmul(&wt)?.broadcast_add(&bt)?.flatten_all()?.to_vec1::<T>()
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims4(l1, self.name())?;
        let (kc, co) = l2.shape().dims2()?;
        if kc != self.k * self.k * c || l3.shape().dims() != [co] {
            candle_core::bail!(
                "{}: input {:?}, weight {:?}, bias {:?} are incompatible for k={}",
                self.name(),
                l1.shape(),
                l2.shape(),
                l3.shape(),
                self.k
            );
        }
        let name = self.name();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wt), CpuStorage::F32(bs)) => CpuStorage::F32(conv_fwd(
                contiguous(x, l1, name)?,
                (b, h, w, c),
                contiguous(wt, l2, name)?,
                contiguous(bs, l3, name)?,
                self.k,
            )?),
            (CpuStorage::F64(x), CpuStorage::F64(wt), CpuStorage::F64(bs)) => CpuStorage::F64(conv_fwd(
                contiguous(x, l1, name)?,
                (b, h, w, c),
                contiguous(wt, l2, name)?,
                contiguous(bs, l3, name)?,
                self.k,
            )?),
            _ => candle_core::bail!("{name}: unsupported or mixed dtypes {:?}", s1.dtype()),
        };
        Ok((out, Shape::from((b, h, w, co))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, h, wd, _) = x.dims4()?;
        let (kc, co) = w.dims2()?;
        let n = b * h * wd;
        let g = grad.detach().contiguous()?.reshape((n, co))?;
        let x = x.detach();
        let cols = if self.k == 1 { x.contiguous()? } else { x.contiguous()?.apply_op1(Im2Col { k: self.k })? };
        let gw = cols.reshape((n, kc))?.t()?.matmul(&g)?;
        let gb = g.sum(0)?;
        let gcols = g.matmul(&w.detach().t()?)?.reshape((b, h, wd, kc))?;
        let gx = if self.k == 1 { gcols } else { gcols.apply_op1(Col2Im { k: self.k })? };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Fused "same"-padded stride-1 convolution, see [`Conv`].
pub fn conv_nhwc(x: &Tensor, weight: &Tensor, bias: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        candle_core::bail!("conv kernel size must be odd, got {k}");
    }
    x.contiguous()?.apply_op3(weight, bias, Conv { k })
}

/// Space-to-depth: `B×H×W×C → B×(H/r)×(W/r)×(r·r·C)`, channels ordered `(dy, dx, c)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        candle_core::bail!("pixel_unshuffle: {h}x{w} not divisible by {r}");
    }
    x.reshape((b, h / r, r, w / r, r, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / r, w / r, r * r * c))
}

/// Depth-to-space, the inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    if c % (r * r) != 0 {
        candle_core::bail!("pixel_shuffle: {c} channels not divisible by {}", r * r);
    }
    let oc = c / (r * r);
    x.reshape((b, h, w, r, r, oc))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * r, w * r, oc))
}

pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))
}

pub fn avg_pool(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        candle_core::bail!("avg_pool: {h}x{w} not divisible by {r}");
    }
    x.reshape((b, h / r, r, w / r, r, c))?
        .sum_keepdim(2)?
        .sum_keepdim(4)?
        .reshape((b, h / r, w / r, c))?
        .affine(1.0 / (r * r) as f64, 0.0)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}

pub const LN_EPS: f64 = 1e-6;

/// Parameter-free layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)
}

/// Rows scaled to unit L2 norm along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&n)
}

/// `n_out × n_in` half-pixel-centred linear interpolation matrix (align_corners = false).
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    m
}

/// Bilinearly resamples an `H×W×C` tensor to `h×w×C` via two interpolation matmuls.
pub fn resample_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (h0, w0, c) = x.dims3()?;
    if (h0, w0) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h0, h), (h, h0), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w0, w), (w, w0), dev)?.to_dtype(x.dtype())?;
    let t = ry.matmul(&x.reshape((h0, w0 * c))?)?.reshape((h, w0, c))?;
    let t = t.transpose(0, 1)?.contiguous()?.reshape((w0, h * c))?;
    rx.matmul(&t)?.reshape((w, h, c))?.transpose(0, 1)?.contiguous()
}

/// Fixed 2-D sine-cosine position embedding, `(h·w) × dim`.
pub fn sincos_2d(h: usize, w: usize, dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut out = vec![0f64; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter.max(1) as f64);
                row[i] = (y as f64 * omega).sin();
                row[quarter + i] = (y as f64 * omega).cos();
                row[2 * quarter + i] = (x as f64 * omega).sin();
                row[3 * quarter + i] = (x as f64 * omega).cos();
            }
        }
    }
    Tensor::from_vec(out, (h * w, dim), dev)?.to_dtype(dtype)
}

/// Sinusoidal embedding of scalar positions: `B → B×dim` (`dim/2` frequencies, cos then sin).
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = vec![0f64; positions.len() * dim];
    for (b, p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[b * dim + i] = (p * freq).cos();
            out[b * dim + half + i] = (p * freq).sin();
        }
    }
    Tensor::from_vec(out, (positions.len(), dim), dev)?.to_dtype(dtype)
}

/// Channels-last `B×H×W×3` tensor from a batch of equally sized images.
pub fn nhwc_from_images(images: &[noiseprompt_core::Image], dtype: DType, dev: &Device) -> Result<Tensor> {
    let (h, w) = images.first().map(|i| i.shape()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.shape() != (h, w) {
            candle_core::bail!("batch images differ in shape: {:?} vs {:?}", img.shape(), (h, w));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(data, (images.len(), h, w, 3), dev)?.to_dtype(dtype)
}

pub fn images_from_nhwc(x: &Tensor) -> Result<Vec<noiseprompt_core::Image>> {
    let (b, h, w, c) = x.dims4()?;
    if c != 3 {
        candle_core::bail!("expected 3 channels, got {c}");
    }
    let flat: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(h * w * 3)
        .take(b)
        .map(|d| noiseprompt_core::Image { height: h, width: w, data: d.to_vec() })
        .collect())
}
