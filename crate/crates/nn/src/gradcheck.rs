//! Finite-difference verification of autodiff gradients.
//!
//! Intended for `f64` parameter stores: a scalar loss closure is differentiated analytically,
//! then randomly chosen parameter elements are perturbed by `±h` and the central difference is
//! compared against the analytic value.

use candle_core::{DType, Tensor};
use noiseprompt_core::rng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::collect_grads;
use crate::params::ParamStore;

pub const STEP: f64 = 1e-6;
/// Floor on the relative-error denominator, so gradients that are both ~0 compare as equal.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Overwrites every parameter whose name has `prefix` with `N(0, std²)` values, keyed by
/// `seed`; useful to move zero-initialized layers away from their degenerate starting point.
pub fn randomize(ps: &ParamStore, seed: u64, std: f64) -> Result<()> {
    for (name, var) in ps.iter() {
        let mut s = rng::stream_nd(seed, &format!("randomize/{name}"), &[]);
        let v: Vec<f64> = rng::normal_vec_f64(&mut s, var.elem_count()).into_iter().map(|x| x * std).collect();
        let t = Tensor::from_vec(v, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares analytic and central-difference gradients on `samples` randomly chosen elements
/// of the parameters whose names start with `prefix`.
pub fn check_gradients(
    ps: &ParamStore,
    prefix: &str,
    samples: usize,
    seed: u64,
    mut loss: impl FnMut() -> Result<Tensor>,
) -> Result<GradReport> {
    if ps.dtype() != DType::F64 {
        return Err(Error::config("gradient checks need an f64 parameter store"));
    }
    let grads = collect_grads(ps, &loss()?.backward()?);
    let names: Vec<&String> = ps.iter().map(|(k, _)| k).filter(|k| k.starts_with(prefix)).collect();
    if names.is_empty() {
        return Err(Error::config(format!("no parameters match prefix {prefix:?}")));
    }
    let total: usize = names.iter().map(|n| ps.get(n).expect("listed").elem_count()).sum();
    let mut s = rng::stream(seed, "gradcheck", 0);
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for _ in 0..samples {
        // pick uniformly over all matching elements
        let mut flat = s.random_range(0..total);
        let mut pick = None;
        for n in &names {
            let c = ps.get(n).expect("listed").elem_count();
            if flat < c {
                pick = Some((*n, flat));
                break;
            }
            flat -= c;
        }
        let (name, idx) = pick.expect("index within total");
        let var = ps.get(name).expect("listed");
        let original = var.as_tensor().detach().copy()?;
        let base = original.flatten_all()?.to_vec1::<f64>()?;
        let mut eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
            scalar(&loss()?)
        };
        let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        var.set(&original)?;
        let analytic = match grads.get(name) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[idx],
            None => 0.0,
        };
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((name.clone(), idx, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut ps = ParamStore::new(0, DType::F64);
        let w = ps.get_or_init("w", 5, Init::Normal(1.0)).unwrap();
        let ok = check_gradients(&ps, "", 20, 1, || Ok((w.sqr()?.sin()?).sum_all()?)).unwrap();
        assert_eq!(ok.checked, 20);
        assert!(ok.max_rel_err < 1e-6, "{ok:?}");
        // a detached branch hides part of the dependence from autodiff
        let bad = check_gradients(&ps, "", 20, 1, || Ok((w.sqr()? + w.detach().sqr()?)?.sum_all()?)).unwrap();
        assert!((bad.max_rel_err - 0.5).abs() < 1e-4, "{bad:?}");
    }

    #[test]
    fn rejects_f32_and_unknown_prefix() {
        let mut ps = ParamStore::new(0, DType::F32);
        let w = ps.get_or_init("w", 2, Init::Zeros).unwrap();
        assert!(check_gradients(&ps, "", 1, 0, || Ok(w.sum_all()?)).unwrap_err().is_config());
        let mut ps = ParamStore::new(0, DType::F64);
        let w = ps.get_or_init("w", 2, Init::Zeros).unwrap();
        assert!(check_gradients(&ps, "v", 1, 0, || Ok(w.sum_all()?)).unwrap_err().is_config());
    }
}
