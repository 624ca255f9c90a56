//! Prompt DiT: a transformer over latent tokens with adaptive-LN conditioning and prompt
//! attention, wrapped in the EDM consistency parameterization.

use candle_core::{DType, Device, Tensor, D};
use noiseprompt_core::config::{PaeConfig, PditConfig};
use noiseprompt_core::rng;
use noiseprompt_core::schedule::EdmCoefficients;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::ops::{avg_pool, l2_normalize, layer_norm, pixel_shuffle, pixel_unshuffle, sincos_2d, sinusoidal, softmax_last};
use crate::pae::{PromptFeatures, SCALES};
use crate::params::{Init, ParamStore};

/// Scale applied to `ln σ` before the sinusoidal embedding, so the usable σ range spans many
/// periods of the highest frequencies.
pub const SIGMA_EMBED_SCALE: f64 = 250.0;
pub const TEMPERATURE_INIT: f64 = std::f64::consts::LN_10;
/// Upper clamp of the learned log-temperature (`ln 100`).
pub const LOG_TEMPERATURE_MAX: f64 = 4.605_170_185_988_092;

/// Keys the dropout masks of one forward pass. Passes sharing a key draw identical masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutKey {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
}

impl DropoutKey {
    fn mask(&self, site: &str, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let keep = 1.0 - self.rate;
        let mut s = rng::stream_nd(self.seed, &format!("dropout/{site}"), &[self.step]);
        let v: Vec<f32> = (0..n)
            .map(|_| if s.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
    }

    fn apply(key: Option<&DropoutKey>, site: &str, x: &Tensor) -> Result<Tensor> {
        match key {
            Some(k) if k.rate > 0.0 => Ok((x * k.mask(site, x.dims(), x.dtype(), x.device())?)?),
            _ => Ok(x.clone()),
        }
    }
}

/// `LN(x)·(1 + scale) + shift`; `x` is `B×T×D`, `shift`/`scale` are `B×D`.
pub fn adaln(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let n = layer_norm(x)?;
    Ok(n.broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

fn chunk(t: &Tensor, i: usize, d: usize) -> Result<Tensor> {
    Ok(t.narrow(D::Minus1, i * d, d)?)
}

/// Spatial map `B×h×w×C` → tokens `B×(h/p·w/p)×(p²C)`.
pub fn tokenize(x: &Tensor, p: usize) -> Result<Tensor> {
    let t = pixel_unshuffle(x, p)?;
    let (b, h, w, c) = t.dims4()?;
    Ok(t.reshape((b, h * w, c))?)
}

/// Inverse of [`tokenize`] for a grid of `h×w` spatial positions.
pub fn detokenize(tokens: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    if n * p * p != h * w {
        return Err(Error::contract(format!("{n} tokens cannot tile a {h}x{w} grid at patch {p}")));
    }
    Ok(pixel_shuffle(&tokens.reshape((b, h / p, w / p, c))?, p)?)
}

/// Conditioning derived from the clean image and the prompt features.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `F_Cond`, `B × h × w × E` at latent resolution.
    pub map: Tensor,
    /// Global-average-pooled `F_Cond` projected to `hidden_dim`, `B × D`.
    pub pooled: Tensor,
}

impl Conditioning {
    pub fn index(&self, ids: &Tensor) -> Result<Self> {
        Ok(Self {
            map: self.map.index_select(ids, 0)?,
            pooled: self.pooled.index_select(ids, 0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CondEmbed {
    pub clean: Conv2d,
    pub local: Conv2d,
    pub global: Vec<Conv2d>,
    pub pool: Linear,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub modulation: Linear,
    pub qkv: Linear,
    pub cond_qkv: Linear,
    pub log_temperature: Tensor,
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Pdit {
    pub cfg: PditConfig,
    pub c_z: usize,
    pub cond_dim: usize,
    pub edm: EdmCoefficients,
    pub sigma_min: f64,
    pub params: ParamStore,
    pub x_embed: Linear,
    pub t_embed: (Linear, Linear),
    pub cond: CondEmbed,
    pub blocks: Vec<Block>,
    pub final_mod: Linear,
    pub final_out: Linear,
}

impl Pdit {
    pub fn new(cfg: &PditConfig, pae: &PaeConfig, edm: EdmCoefficients, sigma_min: f64, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let d = cfg.hidden_dim;
        let p = cfg.token_patch;
        let cc = cfg.cond_channels;
        let cond_dim = cc * (2 + SCALES);
        let tok_cond = cond_dim * p * p;
        let f = 8 / cfg.cond_downsample;
        let cond = CondEmbed {
            clean: Conv2d::new(&mut ps, "cond.clean", 3 * f * f, cc, 3)?,
            local: Conv2d::new(&mut ps, "cond.local", pae.c_local * 64, cc, 3)?,
            global: (0..SCALES)
                .map(|l| {
                    let r = 8 >> l;
                    Conv2d::new(&mut ps, &format!("cond.global{l}"), pae.c_global * r * r, cc, 3)
                })
                .collect::<candle_core::Result<_>>()?,
            pool: Linear::new(&mut ps, "cond.pool", cond_dim, d)?,
        };
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.num_blocks)
            .map(|i| -> Result<Block> {
                let n = format!("block{i}");
                Ok(Block {
                    modulation: Linear::zeros(&mut ps, &format!("{n}.modulation"), d, 6 * d + 2 * tok_cond)?,
                    qkv: Linear::new(&mut ps, &format!("{n}.qkv"), d, 3 * d)?,
                    cond_qkv: Linear::new(&mut ps, &format!("{n}.cond_qkv"), tok_cond, 3 * d)?,
                    log_temperature: ps.get_or_init(&format!("{n}.log_temperature"), 1, Init::Const(TEMPERATURE_INIT))?,
                    proj: Linear::new(&mut ps, &format!("{n}.proj"), d, d)?,
                    fc1: Linear::new(&mut ps, &format!("{n}.fc1"), d, hidden)?,
                    fc2: Linear::new(&mut ps, &format!("{n}.fc2"), hidden, d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            c_z: pae.c_z,
            cond_dim,
            edm,
            sigma_min,
            x_embed: Linear::new(&mut ps, "x_embed", pae.c_z * p * p, d)?,
            t_embed: (Linear::new(&mut ps, "t_embed.0", d, d)?, Linear::new(&mut ps, "t_embed.1", d, d)?),
            cond,
            blocks,
            final_mod: Linear::zeros(&mut ps, "final.modulation", d, 2 * d)?,
            final_out: Linear::zeros(&mut ps, "final.out", d, pae.c_z * p * p)?,
            params: ps,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Sinusoidal embedding of `ln σ` followed by a two-layer MLP; `B × hidden_dim`.
    pub fn timestep_embed(&self, sigmas: &[f64]) -> Result<Tensor> {
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::contract(format!("sigma must be positive and finite, got {s}")));
        }
        let pos: Vec<f64> = sigmas.iter().map(|s| SIGMA_EMBED_SCALE * s.ln()).collect();
        let e = sinusoidal(&pos, self.cfg.hidden_dim, self.dtype(), self.device())?;
        Ok(self.t_embed.1.forward(&self.t_embed.0.forward(&e)?.silu()?)?)
    }

    /// Builds `F_Cond` at latent resolution from the clean image and prompt features.
    /// `train_noise` adds `N(0, cond_noise_std²)` to the pooled clean image.
    pub fn cond_embed(&self, clean: &Tensor, prompts: &PromptFeatures, train_noise: Option<&mut rng::Stream>) -> Result<Conditioning> {
        let (b, h, w, c) = clean.dims4()?;
        let shape_err = || Error::contract(format!("cond_embed: prompt features do not match clean {:?}", clean.dims()));
        if c != 3 || h % 8 != 0 || w % 8 != 0 || prompts.global.len() != SCALES {
            return Err(shape_err());
        }
        if prompts.local.dims4()? != (b, h, w, prompts.local.dim(3)?) {
            return Err(shape_err());
        }
        for (l, g) in prompts.global.iter().enumerate() {
            let (gb, gh, gw, _) = g.dims4()?;
            if (gb, gh, gw) != (b, h >> l, w >> l) {
                return Err(shape_err());
            }
        }
        let mut pooled = avg_pool(clean, self.cfg.cond_downsample)?;
        if let Some(s) = train_noise {
            if self.cfg.cond_noise_std > 0.0 {
                let n = rng::normal_vec(s, pooled.elem_count());
                let n = Tensor::from_vec(n, pooled.dims(), clean.device())?.to_dtype(clean.dtype())?;
                pooled = (pooled + (n * self.cfg.cond_noise_std)?)?;
            }
        }
        let mut parts = vec![
            self.cond.clean.forward(&pixel_unshuffle(&pooled, 8 / self.cfg.cond_downsample)?)?,
            self.cond.local.forward(&pixel_unshuffle(&prompts.local, 8)?)?,
        ];
        for (l, g) in prompts.global.iter().enumerate() {
            parts.push(self.cond.global[l].forward(&pixel_unshuffle(g, 8 >> l)?)?);
        }
        let map = Tensor::cat(&parts, D::Minus1)?;
        let gap = map.mean(1)?.mean(1)?;
        Ok(Conditioning {
            pooled: self.cond.pool.forward(&gap)?,
            map,
        })
    }

    /// `F_θ(x, σ, cond)`: the raw network on an (already `c_in`-scaled) latent.
    pub fn network(&self, x: &Tensor, sigmas: &[f64], cond: &Conditioning, dropout: Option<&DropoutKey>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let p = self.cfg.token_patch;
        if c != self.c_z || h % p != 0 || w % p != 0 || sigmas.len() != b {
            return Err(Error::contract(format!(
                "latent {:?} incompatible with c_z={}, token_patch={p}, {} sigmas",
                x.dims(),
                self.c_z,
                sigmas.len()
            )));
        }
        let (cb, ch, cw, _) = cond.map.dims4()?;
        if (cb, ch, cw) != (b, h, w) {
            return Err(Error::contract(format!("conditioning {:?} not aligned with latent {:?}", cond.map.dims(), x.dims())));
        }
        let d = self.cfg.hidden_dim;
        let pos = sincos_2d(h / p, w / p, d, self.dtype(), self.device())?;
        let mut tokens = self.x_embed.forward(&tokenize(x, p)?)?.broadcast_add(&pos.unsqueeze(0)?)?;
        let cond_tokens = tokenize(&cond.map, p)?;
        let c_vec = (self.timestep_embed(sigmas)? + &cond.pooled)?.silu()?;
        for (i, blk) in self.blocks.iter().enumerate() {
            tokens = blk.forward(&tokens, &cond_tokens, &c_vec, &self.cfg, i, dropout)?.0;
        }
        let m = self.final_mod.forward(&c_vec)?;
        let out = self.final_out.forward(&adaln(&tokens, &chunk(&m, 0, d)?, &chunk(&m, 1, d)?)?)?;
        detokenize(&out, h, w, p)
    }

    /// `ẑ₀ = c_skip·z_t + c_out·F_θ(c_in·z_t, σ_t, cond)` with per-sample `σ_t`.
    pub fn consistency_fn(&self, z_t: &Tensor, sigmas: &[f64], cond: &Conditioning, dropout: Option<&DropoutKey>) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        if sigmas.len() != b {
            return Err(Error::contract(format!("{} sigmas for a batch of {b}", sigmas.len())));
        }
        if let Some(s) = sigmas.iter().find(|s| **s < self.sigma_min) {
            return Err(Error::contract(format!("sigma {s} below sigma_min {}", self.sigma_min)));
        }
        let pre: Vec<_> = sigmas.iter().map(|s| self.edm.coeffs(*s, self.sigma_min)).collect();
        let col = |f: &dyn Fn(usize) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = (0..b).map(f).collect();
            Ok(Tensor::from_vec(v, (b, 1, 1, 1), z_t.device())?.to_dtype(z_t.dtype())?)
        };
        let c_in = col(&|i| pre[i].c_in)?;
        let c_skip = col(&|i| pre[i].c_skip)?;
        let c_out = col(&|i| pre[i].c_out)?;
        let f = self.network(&z_t.broadcast_mul(&c_in)?, sigmas, cond, dropout)?;
        Ok((z_t.broadcast_mul(&c_skip)? + f.broadcast_mul(&c_out)?)?)
    }
}

impl Block {
    pub fn temperature(&self) -> Result<Tensor> {
        Ok(self.log_temperature.clamp(0.0, LOG_TEMPERATURE_MAX)?.exp()?)
    }

    /// Returns the updated tokens and the attention weights `B × heads × T × T`.
    pub fn forward(
        &self,
        x: &Tensor,
        cond_tokens: &Tensor,
        c: &Tensor,
        cfg: &PditConfig,
        index: usize,
        dropout: Option<&DropoutKey>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = x.dims3()?;
        let e = cond_tokens.dim(2)?;
        if cond_tokens.dims3()?.1 != t {
            return Err(Error::contract(format!("{} condition tokens for {t} latent tokens", cond_tokens.dim(1)?)));
        }
        let heads = cfg.num_heads;
        let dh = d / heads;
        let m = self.modulation.forward(c)?;
        let mods: Vec<Tensor> = (0..6).map(|i| chunk(&m, i, d)).collect::<Result<_>>()?;
        let cond_shift = m.narrow(D::Minus1, 6 * d, e)?;
        let cond_scale = m.narrow(D::Minus1, 6 * d + e, e)?;

        let h = adaln(x, &mods[0], &mods[1])?;
        let qkv = (self.qkv.forward(&h)? + self.cond_qkv.forward(&adaln(cond_tokens, &cond_shift, &cond_scale)?)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(chunk(&qkv, i, d)?.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = l2_normalize(&split(0)?)?;
        let k = l2_normalize(&split(1)?)?;
        let v = split(2)?;
        let logits = q.matmul(&k.t()?)?.broadcast_mul(&self.temperature()?)?;
        let attn = softmax_last(&logits)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        let o = DropoutKey::apply(dropout, &format!("block{index}.attn"), &self.proj.forward(&o)?)?;
        let x = (x + o.broadcast_mul(&mods[2].unsqueeze(1)?)?)?;

        let h = adaln(&x, &mods[3], &mods[4])?;
        let h = self.fc1.forward(&h)?.gelu()?;
        let h = DropoutKey::apply(dropout, &format!("block{index}.mlp"), &h)?;
        let x = (&x + self.fc2.forward(&h)?.broadcast_mul(&mods[5].unsqueeze(1)?)?)?;
        Ok((x, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, randomize};
    use noiseprompt_core::schedule::pseudo_huber_c;

    fn tiny() -> (PditConfig, PaeConfig) {
        let pdit = PditConfig {
            num_blocks: 2,
            hidden_dim: 16,
            num_heads: 2,
            cond_channels: 2,
            ..PditConfig::default()
        };
        let pae = PaeConfig {
            c_z: 2,
            c_global: 2,
            c_local: 2,
            ..PaeConfig::default()
        };
        (pdit, pae)
    }

    fn model(dtype: DType) -> Pdit {
        let (p, a) = tiny();
        Pdit::new(&p, &a, EdmCoefficients { sigma_data: 0.5 }, 0.002, 7, dtype).unwrap()
    }

    fn randn(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
        let n = shape.iter().product();
        let v = rng::normal_vec_f64(&mut rng::stream(seed, "test-pdit", 0), n);
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn prompts(b: usize, h: usize, dtype: DType) -> PromptFeatures {
        PromptFeatures {
            global: (0..SCALES).map(|l| randn(10 + l as u64, &[b, h >> l, h >> l, 2], dtype)).collect(),
            local: randn(20, &[b, h, h, 2], dtype),
        }
    }

    fn vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn boundary_condition_is_exact() {
        let m = model(DType::F32);
        randomize(&m.params, 3, 0.3).unwrap();
        let clean = randn(1, &[2, 32, 32, 3], DType::F32).affine(0.1, 0.5).unwrap();
        let cond = m.cond_embed(&clean, &prompts(2, 32, DType::F32), None).unwrap();
        let z = randn(2, &[2, 4, 4, 2], DType::F32);
        let out = m.consistency_fn(&z, &[0.002, 0.002], &cond, None).unwrap();
        assert_eq!(vec(&out), vec(&z));
        let moved = m.consistency_fn(&z, &[5.0, 5.0], &cond, None).unwrap();
        assert_eq!(moved.dims(), z.dims());
        assert_ne!(vec(&moved), vec(&z));
    }

    #[test]
    fn timestep_embedding_contract() {
        let m = model(DType::F64);
        let e = m.timestep_embed(&[0.002, 80.0, 0.002]).unwrap();
        assert_eq!(e.dims(), &[3, 16]);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| vec(&e.get(i).unwrap())).collect();
        assert_eq!(rows[0], rows[2]);
        let dot: f64 = rows[0].iter().zip(&rows[1]).map(|(a, b)| a * b).sum();
        let n = |r: &Vec<f64>| r.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (n(&rows[0]) * n(&rows[1])) < 0.99);
        assert!(m.timestep_embed(&[0.0]).unwrap_err().is_contract());
        assert!(m.timestep_embed(&[-1.0]).unwrap_err().is_contract());
    }

    #[test]
    fn cond_embed_shapes_and_bias_path() {
        let m = model(DType::F64);
        let clean = Tensor::zeros((1, 16, 16, 3), DType::F64, &Device::Cpu).unwrap();
        let zero = PromptFeatures {
            global: (0..SCALES).map(|l| Tensor::zeros((1, 16 >> l, 16 >> l, 2), DType::F64, &Device::Cpu).unwrap()).collect(),
            local: Tensor::zeros((1, 16, 16, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        let c = m.cond_embed(&clean, &zero, None).unwrap();
        assert_eq!(c.map.dims(), &[1, 2, 2, m.cond_dim]);
        let mut bias = vec(&m.cond.clean.bias);
        bias.extend(vec(&m.cond.local.bias));
        for g in &m.cond.global {
            bias.extend(vec(&g.bias));
        }
        let map = vec(&c.map);
        for px in map.chunks(m.cond_dim) {
            assert_eq!(px, &bias[..]);
        }
        let bad = prompts(1, 8, DType::F64);
        assert!(m.cond_embed(&clean, &bad, None).unwrap_err().is_contract());
    }

    #[test]
    fn attention_rows_sum_to_one_and_logits_are_bounded() {
        let m = model(DType::F64);
        randomize(&m.params, 4, 0.5).unwrap();
        let x = (randn(5, &[2, 9, 16], DType::F64) * 1e3).unwrap();
        let cond = randn(6, &[2, 9, m.cond_dim], DType::F64);
        let c = randn(7, &[2, 16], DType::F64);
        let (y, attn) = m.blocks[0].forward(&x, &cond, &c, &m.cfg, 0, None).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_eq!(attn.dims(), &[2, 2, 9, 9]);
        for row in vec(&attn.sum(D::Minus1).unwrap()) {
            assert!((row - 1.0).abs() < 1e-5);
        }
        // with |logit| ≤ τ the smallest attention weight is at least e^{-2τ}/T
        let tau = vec(&m.blocks[0].temperature().unwrap())[0];
        let min = vec(&attn).into_iter().fold(f64::INFINITY, f64::min);
        assert!(min >= (-2.0 * tau).exp() / 9.0 * (1.0 - 1e-9));
        let bad = randn(6, &[2, 8, m.cond_dim], DType::F64);
        assert!(m.blocks[0].forward(&x, &bad, &c, &m.cfg, 0, None).unwrap_err().is_contract());
    }

    #[test]
    fn adaln_properties() {
        let x = randn(8, &[1, 5, 32], DType::F64);
        let zeros = Tensor::zeros((1, 32), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(vec(&adaln(&x, &zeros, &zeros).unwrap()), vec(&layer_norm(&x).unwrap()));
        let shift = Tensor::full(0.7f64, (1, 32), &Device::Cpu).unwrap();
        let scale = Tensor::full(-3.0f64, (1, 32), &Device::Cpu).unwrap();
        let y = adaln(&x, &shift, &scale).unwrap();
        for tok in vec(&y).chunks(32) {
            let mean = tok.iter().sum::<f64>() / 32.0;
            let std = (tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0).sqrt();
            assert!((mean - 0.7).abs() < 1e-9);
            assert!((std - 2.0).abs() < 1e-3);
        }
        let x2 = ((&x * 3.5).unwrap() - 1.25).unwrap();
        let y2 = adaln(&x2, &shift, &scale).unwrap();
        for (a, b) in vec(&y).iter().zip(vec(&y2)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tokenize_round_trip() {
        let x = randn(9, &[2, 4, 6, 3], DType::F64);
        for p in [1, 2] {
            let t = tokenize(&x, p).unwrap();
            assert_eq!(t.dims(), &[2, 24 / (p * p), 3 * p * p]);
            assert_eq!(vec(&detokenize(&t, 4, 6, p).unwrap()), vec(&x));
        }
    }

    #[test]
    fn dropout_masks_are_keyed() {
        let m = model(DType::F32);
        randomize(&m.params, 4, 0.5).unwrap();
        let clean = randn(1, &[1, 16, 16, 3], DType::F32).affine(0.1, 0.5).unwrap();
        let cond = m.cond_embed(&clean, &prompts(1, 16, DType::F32), None).unwrap();
        let z = randn(2, &[1, 2, 2, 2], DType::F32);
        let key = DropoutKey { rate: 0.5, seed: 1, step: 3 };
        let a = m.consistency_fn(&z, &[1.0], &cond, Some(&key)).unwrap();
        let b = m.consistency_fn(&z, &[1.0], &cond, Some(&key)).unwrap();
        let other = DropoutKey { step: 4, ..key };
        let c = m.consistency_fn(&z, &[1.0], &cond, Some(&other)).unwrap();
        let inference = m.consistency_fn(&z, &[1.0], &cond, None).unwrap();
        assert_eq!(vec(&a), vec(&b));
        assert_ne!(vec(&a), vec(&c));
        assert_eq!(vec(&inference), vec(&m.consistency_fn(&z, &[1.0], &cond, None).unwrap()));
    }

    #[test]
    fn consistency_gradients_match_finite_differences() {
        let m = model(DType::F64);
        randomize(&m.params, 11, 0.3).unwrap();
        let clean = randn(1, &[2, 64, 64, 3], DType::F64).affine(0.1, 0.5).unwrap();
        let pr = prompts(2, 64, DType::F64);
        let z = randn(2, &[2, 8, 8, 2], DType::F64);
        let target = randn(3, &[2, 8, 8, 2], DType::F64);
        let c = pseudo_huber_c(128);
        let report = check_gradients(&m.params, "", 50, 12, || {
            let cond = m.cond_embed(&clean, &pr, None)?;
            let out = m.consistency_fn(&z, &[0.7, 3.0], &cond, None)?;
            let sq = (out - &target)?.sqr()?.sum_all()?;
            Ok(((sq + c * c)?.sqrt()? - c)?)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
