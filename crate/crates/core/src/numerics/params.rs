use std::collections::HashMap;

use rand::Rng as _;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Ordered parameter collection. Registration order is the checkpoint
/// order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    #[doc(hidden)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let n = value.len();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, m: vec![0.0; n], v: vec![0.0; n], step: 0 });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform(-bound, bound) initialization.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Empty gradient slots, one per parameter.
    pub fn grad_slots(&self) -> Vec<Vec<f64>> {
        vec![Vec::new(); self.params.len()]
    }

    /// Rounds values and optimizer moments through f32 so the in-memory
    /// state equals what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        let r = |x: &mut f64| *x = f64::from(*x as f32);
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(r);
            p.m.iter_mut().for_each(r);
            p.v.iter_mut().for_each(r);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. An empty gradient slot counts as zero.
pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape(format!("{} gradient slots for {} parameters", grads.len(), store.len())));
    }
    for (p, g) in store.params.iter_mut().zip(grads) {
        if !g.is_empty() && g.len() != p.value.len() {
            return Err(Error::Shape(format!("gradient for {} has {} values, expected {}", p.name, g.len(), p.value.len())));
        }
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let data = p.value.data_mut();
        for k in 0..data.len() {
            let gk = if g.is_empty() { 0.0 } else { g[k] };
            p.m[k] = cfg.beta1 * p.m[k] + (1.0 - cfg.beta1) * gk;
            p.v[k] = cfg.beta2 * p.v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = p.m[k] / c1;
            let v_hat = p.v[k] / c2;
            data[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.clone();
        adam_step(&mut s, &[vec![0.0; 3]], &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.get(ParamId(0)).value, before.get(ParamId(0)).value);
        assert_eq!(s.get(ParamId(0)).step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(0.0)).unwrap();
        let cfg = AdamConfig::with_lr(1e-3);
        adam_step(&mut s, &[vec![1.0]], &cfg).unwrap();
        let delta = s.get(ParamId(0)).value.item();
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(1.0)).is_err());
    }
}
