use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named dense parameter with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
    pub trainable: bool,
}

/// Adam hyperparameters; only the learning rate usually changes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named parameters, their gradient buffers and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Result<ParamId> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(Error::shape(format!("param `{name}` shape {shape:?} vs {} values", value.len())));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param {
            name,
            shape,
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
            value,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of Adam steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.len(), grad.len());
        for (g, x) in p.grad.iter_mut().zip(grad) {
            *g += x;
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flat_values(&self) -> Vec<f32> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Overwrites all values from a flat buffer (inverse of [`flat_values`]).
    ///
    /// [`flat_values`]: ParamStore::flat_values
    pub fn set_flat_values(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::shape(format!("expected {} parameter values, got {}", self.scalar_count(), flat.len())));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flat_grads(&self) -> Vec<f32> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Drops optimizer state (moments and step count).
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
    }

    /// One bias-corrected Adam update of every trainable parameter, then
    /// zeroes all gradients. A non-finite gradient aborts the step before any
    /// value changes.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite())) {
            let name = p.name.clone();
            self.zero_grad();
            return Err(Error::NonFiniteGrad(name));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64;
                let m = cfg.beta1 * p.m[i] as f64 + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
                p.m[i] = m as f32;
                p.v[i] = v as f32;
                let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
                p.value[i] = (p.value[i] as f64 - update) as f32;
            }
        }
        self.zero_grad();
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn moments(&self, id: ParamId) -> (&[f32], &[f32]) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f32>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("p", vec![n], values).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let (mut s, id) = store(vec![1.0, -2.0, 3.0]);
        s.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.get(id).value, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut s, id) = store(vec![0.0]);
        s.accumulate_grad(id, &[1.0]);
        s.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        let (m1, v1) = (s.moments(id).0[0], s.moments(id).1[0]);
        s.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        let (m2, v2) = s.moments(id);
        assert!((m2[0] - 0.9 * m1).abs() < 1e-7);
        assert!((v2[0] - 0.999 * v1).abs() < 1e-9);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store(vec![0.5, 0.5]);
        s.accumulate_grad(id, &[0.3, -2.0]);
        let cfg = AdamConfig::with_lr(0.01);
        s.adam_step(&cfg).unwrap();
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        for (i, g) in [0.3f64, -2.0].iter().enumerate() {
            let expect = 0.5 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.get(id).value[i] as f64 - expect).abs() < 1e-7);
        }
        assert!(s.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_descent_matches_scalar_recursion() {
        let (mut s, id) = store(vec![1.0]);
        let cfg = AdamConfig::with_lr(0.05);
        // Independent scalar recursion in f64.
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = s.get(id).value[0];
            s.accumulate_grad(id, &[g]);
            s.adam_step(&cfg).unwrap();
            let gr = p;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            p -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        let got = s.get(id).value[0] as f64;
        assert!(got.abs() < 0.5);
        assert!((got - p).abs() < 1e-4, "{got} vs {p}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = store(vec![1.0, 2.0]);
        s.accumulate_grad(id, &[f32::NAN, 1.0]);
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert_eq!(err.code(), "nonfinite-grad");
        assert_eq!(s.get(id).value, vec![1.0, 2.0]);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.add("step1.w", vec![1], vec![1.0]).unwrap();
        let b = s.add("step2.w", vec![1], vec![1.0]).unwrap();
        s.set_trainable("step1.", false);
        s.accumulate_grad(a, &[1.0]);
        s.accumulate_grad(b, &[1.0]);
        s.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.get(a).value[0], 1.0);
        assert!(s.get(b).value[0] < 1.0);
    }
}
