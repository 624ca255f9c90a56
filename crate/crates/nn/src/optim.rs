//! First-order optimizers, gradient clipping, learning-rate schedules and EMA.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Result, Tensor};

use crate::params::ParamStore;

/// Gradients of every parameter that received one, keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

pub fn collect_grads(ps: &ParamStore, store: &GradStore) -> Grads {
    ps.iter()
        .filter_map(|(name, var)| store.get(var.as_tensor()).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Grads) -> Result<f64> {
    let mut total = 0.0;
    for g in grads.values() {
        total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm` (`0` disables); returns the
/// pre-clipping norm.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads)?;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.values_mut() {
            *g = g.affine(s, 0.0)?;
        }
    }
    Ok(norm)
}

/// Cosine annealing from `lr` at step 0 to exactly `lr_min` at step `total − 1`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_min;
    }
    let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rectify {
    /// Plain Adam.
    None,
    /// RAdam variance rectification.
    RAdam,
}

/// Adam-family optimizer with per-parameter first/second moments.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rectify: Rectify,
    step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn adam() -> Self {
        Self::with(Rectify::None)
    }

    pub fn radam() -> Self {
        Self::with(Rectify::RAdam)
    }

    fn with(rectify: Rectify) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rectify,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, ps: &ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        // RAdam: length of the approximated simple moving average
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
        for (name, var) in ps.iter() {
            let Some(g) = grads.get(name) else { continue };
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * b1)? + (&g * (1.0 - b1))?)?,
                    ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                ),
                None => ((&g * (1.0 - b1))?, (g.sqr()? * (1.0 - b2))?),
            };
            let m_hat = (&m / bc1)?;
            let update = match self.rectify {
                Rectify::RAdam if rho_t <= 5.0 => m_hat,
                Rectify::RAdam => {
                    let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
                    let denom = ((v.sqrt()? / bc2.sqrt())? + self.eps)?;
                    (m_hat.div(&denom)? * r)?
                }
                Rectify::None => {
                    let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
                    m_hat.div(&denom)?
                }
            };
            let p = var.as_tensor().detach();
            var.set(&(p - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·student` over every shared parameter name.
pub fn ema_update(ema: &ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    for (name, e) in ema.iter() {
        let s = student
            .get(name)
            .ok_or_else(|| candle_core::Error::Msg(format!("student lacks parameter {name}")))?;
        let next = ((e.as_tensor().detach() * decay)? + (s.as_tensor().detach() * (1.0 - decay))?)?;
        e.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use candle_core::DType;

    fn scalar(ps: &ParamStore, name: &str) -> f64 {
        ps.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 2000, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(1999, 2000, 1e-4, 1e-6) - 1e-6).abs() < 1e-9);
        assert!((cosine_lr(1000, 2001, 1e-4, 0.0) - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        for mut opt in [Adam::adam(), Adam::radam()] {
            let mut ps = ParamStore::new(0, DType::F64);
            let x = ps.get_or_init("x", 1, Init::Const(3.0)).unwrap();
            for _ in 0..2000 {
                let loss = (&x - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
                let g = collect_grads(&ps, &loss.backward().unwrap());
                opt.step(&ps, &g, 1e-2).unwrap();
            }
            assert!((scalar(&ps, "x") - 1.0).abs() < 1e-2, "{:?}", opt.rectify);
        }
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut ps = ParamStore::new(0, DType::F64);
        let x = ps.get_or_init("x", 1, Init::Const(0.0)).unwrap();
        let loss = (&x * 5.0).unwrap().sum_all().unwrap();
        let g = collect_grads(&ps, &loss.backward().unwrap());
        Adam::adam().step(&ps, &g, 0.1).unwrap();
        assert!((scalar(&ps, "x") + 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut ps = ParamStore::new(0, DType::F64);
        let x = ps.get_or_init("x", 2, Init::Const(1.0)).unwrap();
        let loss = (&x * 10.0).unwrap().sum_all().unwrap();
        let mut g = collect_grads(&ps, &loss.backward().unwrap());
        let n = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((n - 200f64.sqrt()).abs() < 1e-9);
        assert!((grad_norm(&g).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ema_limits() {
        let mut student = ParamStore::new(0, DType::F64);
        let mut ema = ParamStore::new(1, DType::F64);
        student.get_or_init("w", 3, Init::Const(2.0)).unwrap();
        ema.get_or_init("w", 3, Init::Const(-1.0)).unwrap();
        ema_update(&ema, &student, 1.0 - 1e-12).unwrap();
        assert!((scalar(&ema, "w") + 1.0).abs() < 1e-8);
        // constant student: the gap shrinks by `decay` every step
        let decay = 0.9;
        let gap0 = scalar(&student, "w") - scalar(&ema, "w");
        for _ in 0..10 {
            ema_update(&ema, &student, decay).unwrap();
        }
        let gap = scalar(&student, "w") - scalar(&ema, "w");
        assert!((gap / gap0 - decay.powi(10)).abs() < 1e-9);
        ema_update(&ema, &student, 0.0).unwrap();
        assert_eq!(scalar(&ema, "w"), 2.0);
    }
}
