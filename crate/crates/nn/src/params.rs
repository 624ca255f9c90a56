//! Named parameter store with keyed, order-independent initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use noiseprompt_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform on `[−b, b]`.
    Uniform(f64),
}

/// Owns every trainable tensor of a model, addressed by a dotted path.
///
/// Each parameter's initial values come from its own stream keyed by `(seed, name)`, so they
/// never depend on construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the tensor for `name`, creating it with `init` on first use.
    pub fn get_or_init(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        if let Some(v) = self.vars.get(name) {
            if v.shape() != &shape {
                candle_core::bail!("parameter {name}: shape {:?} vs existing {:?}", shape, v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let mut s = rng::stream_nd(self.seed, &format!("init/{name}"), &[]);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n).map(|_| std * s.sample::<f64, _>(StandardNormal)).collect(),
            Init::Uniform(b) => (0..n).map(|_| s.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites parameters in place; every stored name must be present with a matching shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter {name}")))?;
            if t.shape() != var.shape() {
                candle_core::bail!("parameter {name}: stored {:?} vs model {:?}", t.shape(), var.shape());
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.snapshot()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new(1, DType::F32);
        let mut b = ParamStore::new(1, DType::F32);
        let a1 = a.get_or_init("x", (3, 2), Init::Normal(1.0)).unwrap();
        let _ = a.get_or_init("y", 4, Init::Uniform(0.5)).unwrap();
        let _ = b.get_or_init("y", 4, Init::Uniform(0.5)).unwrap();
        let b1 = b.get_or_init("x", (3, 2), Init::Normal(1.0)).unwrap();
        assert_eq!(a1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b1.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(a.get_or_init("x", (2, 3), Init::Zeros).is_err());
    }

    #[test]
    fn load_round_trip() {
        let mut a = ParamStore::new(1, DType::F64);
        let mut b = ParamStore::new(2, DType::F64);
        a.get_or_init("w", (2, 2), Init::Normal(1.0)).unwrap();
        let bw = b.get_or_init("w", (2, 2), Init::Normal(1.0)).unwrap();
        b.copy_from(&a).unwrap();
        let aw = a.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // the handle obtained before loading observes the new values
        assert_eq!(bw.flatten_all().unwrap().to_vec1::<f64>().unwrap(), aw);
    }
}
