use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Arc<Tensor<S>>>,
}

impl<S: Scalar> PartialEq for ParamStore<S> {
    /// Bitwise equality of names, shapes and values.
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_arc(&self, name: &str) -> Option<Arc<Tensor<S>>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    /// Moves every parameter under `prefix` (e.g. `"vq."`) into a new store.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), Arc::clone(v)))
                .collect(),
        }
    }

    /// Parameters whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), Arc::clone(v))))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<S>) {
        self.params.extend(other.params);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<T>())))
                .collect(),
        }
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::of(rng.random_range(-bound..=bound)))
            .collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore<S>) -> Result<()> {
        for (name, t) in &self.params {
            let o = other
                .params
                .get(name)
                .ok_or_else(|| invalid!("missing parameter {name:?}"))?;
            if o.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    found: o.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(invalid!("unexpected parameter {extra:?}"));
        }
        Ok(())
    }
}

/// Global ℓ2 norm over all gradients, accumulated in f64.
pub fn global_norm<S: Scalar>(grads: &BTreeMap<String, Tensor<S>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = S::of(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, eps, wd) = (S::of(c.lr), S::of(c.eps), S::of(c.weight_decay));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| invalid!("gradient for unknown parameter {name:?}"))?;
            if p.shape() != g.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    found: g.shape().to_vec(),
                    expected: p.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![S::zero(); g.numel()], vec![S::zero(); g.numel()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + eps) + wd * *pv;
                *pv -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_with(values: &[f32]) -> BTreeMap<String, Tensor<f32>> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[values.len()], values.to_vec()).unwrap());
        g
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = grads_with(&[6.0, 8.0]);
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 10.0).abs() < 1e-9);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = grads_with(&[0.3, 0.4]);
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g["w"].data(), &[0.3, 0.4]);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::new(&[2], vec![1.25, -3.5]).unwrap());
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &grads_with(&[0.7, -0.1])).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn decoupled_weight_decay_with_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(&[1]));
        opt.step(&mut store, &g).unwrap();
        assert!((store.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap());
        opt.step(&mut store, &g).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-8 && (w[1] - 0.01).abs() < 1e-8);
    }
}
