use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{default_precision, Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Present iff the parameter takes part in optimization.
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// Named, ordered collection of parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    precision: Precision,
    tag: u64,
}

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            precision: default_precision(),
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Identity used to route gradients back to this store.
    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn set_precision(&mut self, p: Precision) {
        self.precision = p;
        for param in &mut self.params {
            p.round_slice(param.value.data_mut());
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Precondition(format!("duplicate parameter name {name}")));
        }
        self.precision.round_slice(value.data_mut());
        let id = ParamId(self.params.len());
        let grad = Some(Tensor::zeros(value.shape().to_vec()));
        self.params.push(Parameter { name: name.clone(), value, grad });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    /// Uniform Xavier/Glorot init for a `fan_in x fan_out` matrix.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![v; n])?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].grad = None;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Adds `scale * grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.iter(self) {
            if let Some(acc) = &mut self.params[id.0].grad {
                for (a, &x) in acc.data_mut().iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales accumulated gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                if let Some(g) = &mut p.grad {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        norm
    }

    /// Overwrites the value of a parameter, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.value.len() {
            return Err(Error::Shape(format!(
                "parameter {} holds {} values, got {}",
                p.name,
                p.value.len(),
                data.len()
            )));
        }
        p.value.data_mut().copy_from_slice(data);
        self.precision.round_slice(p.value.data_mut());
        Ok(())
    }
}

/// Gradients produced by one backward pass, keyed by store and parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<(u64, ParamId, Vec<f64>)>,
}

impl Gradients {
    pub(crate) fn new(grads: Vec<(u64, ParamId, Vec<f64>)>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        self.grads
            .iter()
            .find(|(t, i, _)| *t == store.tag && *i == id)
            .map(|(_, _, g)| g.as_slice())
    }

    pub fn iter<'a>(&'a self, store: &ParamStore) -> impl Iterator<Item = (ParamId, &'a [f64])> {
        let tag = store.tag;
        self.grads
            .iter()
            .filter(move |(t, _, _)| *t == tag)
            .map(|(_, i, g)| (*i, g.as_slice()))
    }

    /// Parameters of `store` that received a (possibly zero) gradient.
    pub fn touched(&self, store: &ParamStore) -> Vec<ParamId> {
        self.iter(store).map(|(i, _)| i).collect()
    }

    /// Parameters of `store` with at least one nonzero gradient entry.
    pub fn nonzero(&self, store: &ParamStore) -> Vec<ParamId> {
        self.iter(store)
            .filter(|(_, g)| g.iter().any(|&x| x != 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn norm(&self, store: &ParamStore) -> f64 {
        self.iter(store)
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Names each gradient after its parameter. Parameters the graph never
    /// touched get an all-zero tensor.
    pub fn named(&self, store: &ParamStore) -> HashMap<String, Tensor> {
        store
            .iter()
            .map(|(id, p)| {
                let data = self
                    .get(store, id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()]);
                (p.name.clone(), Tensor::new(p.value.shape().to_vec(), data).unwrap())
            })
            .collect()
    }
}

/// Adam with optional decoupled gradient clipping handled by the caller.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.98, eps: 1e-9, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.params.len() {
            self.m = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let precision = store.precision;
        for (i, p) in store.params.iter_mut().enumerate() {
            let Some(grad) = &mut p.grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = precision.round(*w - update);
            }
            grad.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_is_a_no_op_for_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add_normal("w", vec![3, 4], 1.0, &mut rng).unwrap();
        let before = store.get(id).value.clone();
        let mut adam = Adam::new(1e-3);
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.get(id).value, before);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add_const("w", vec![2], 0.0).unwrap();
        store.get_mut(id).grad.as_mut().unwrap().data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add_const("a", vec![1], 0.0).unwrap();
        assert!(store.add_const("a", vec![1], 0.0).is_err());
    }
}
