//! Named parameter registry, gradient buffers and the Adam optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::ScenarioId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    /// `None` for parameters shared by every scenario.
    pub owner: Option<ScenarioId>,
    pub value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, owner: Option<ScenarioId>, value: Tensor<T>) -> Self {
        let [r, c] = value.shape();
        Self {
            name,
            owner,
            value: Arc::new(value),
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        }
    }
}

/// Owns every learnable tensor of a model. Values sit behind `Arc` so a
/// scenario subgraph can share them without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    adam_steps: u64,
}

/// Dense gradients aligned with a store's parameter ids.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new(), adam_steps: 0 }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        owner: Option<ScenarioId>,
        value: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param::new(name, owner, value));
        Ok(id)
    }

    fn register_shared(&mut self, name: String, owner: Option<ScenarioId>, value: Arc<Tensor<T>>) {
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let mut p = Param::new(name, owner, Tensor::zeros(0, 0));
        let [r, c] = value.shape();
        p.grad = Tensor::zeros(r, c);
        p.m = Tensor::zeros(r, c);
        p.v = Tensor::zeros(r, c);
        p.value = value;
        self.params.push(p);
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn set_grads(&mut self, grads: Gradients<T>) -> Result<()> {
        if grads.grads.len() != self.params.len() {
            return Err(Error::Dimension("gradient set does not match parameter store".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grads.grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension(format!("gradient shape for `{}`", p.name)));
            }
            p.grad = g;
        }
        Ok(())
    }

    /// Bias-corrected Adam update from the current gradient buffers.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let step = T::of(cfg.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(cfg.eps);
        for p in &mut self.params {
            let value = Arc::make_mut(&mut p.value);
            let w = value.data_mut();
            let g = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                w[i] = w[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Keeps shared parameters plus those owned by `scenario`; values are
    /// shared with `self`.
    pub fn restrict_to(&self, scenario: ScenarioId) -> Self {
        let mut out = Self::new();
        for p in &self.params {
            if p.owner.is_none() || p.owner == Some(scenario) {
                out.register_shared(p.name.clone(), p.owner, Arc::clone(&p.value));
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.owner, p.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.register("w", None, Tensor::zeros(1, 1)).unwrap();
        assert!(s.register("w", None, Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("w", None, Tensor::from_f64(1, 3, &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = s.value(id).clone();
        for _ in 0..5 {
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("w", None, Tensor::from_f64(1, 2, &[0.0, 0.0]).unwrap()).unwrap();
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        for _ in 0..200 {
            let g = Tensor::from_f64(1, 2, &[3.0, -0.01]).unwrap();
            s.set_grads(Gradients { grads: vec![g] }).unwrap();
            let before = s.value(id).clone();
            s.adam_step(&cfg).unwrap();
            let delta = s.value(id).clone();
            // |step| -> lr with the sign opposite to the gradient, independent of magnitude
            assert!((before.get(0, 0) - delta.get(0, 0) - 1e-2).abs() < 1e-6);
            assert!((delta.get(0, 1) - before.get(0, 1) - 1e-2).abs() < 1e-4);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = ParamStore::<f32>::new();
        s.register("tower.bias", None, Tensor::zeros(1, 1)).unwrap();
        s.set_grads(Gradients { grads: vec![Tensor::filled(1, 1, f32::NAN)] }).unwrap();
        match s.adam_step(&AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "tower.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn restriction_shares_values_and_drops_foreign_scenarios() {
        let mut s = ParamStore::<f32>::new();
        s.register("shared", None, Tensor::zeros(2, 2)).unwrap();
        s.register("a", Some(0), Tensor::zeros(2, 2)).unwrap();
        s.register("b", Some(1), Tensor::zeros(2, 2)).unwrap();
        let r = s.restrict_to(1);
        assert_eq!(r.len(), 2);
        assert!(r.contains("b") && !r.contains("a"));
        assert!(Arc::ptr_eq(&s.param(s.id("shared").unwrap()).value, &r.param(r.id("shared").unwrap()).value));
    }
}
