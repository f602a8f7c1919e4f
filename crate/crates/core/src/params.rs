//! Named parameter tensors, tape binding and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Tape, Var};

/// Parameter tensors keyed by hierarchical name (`"conv.w"`, `"gru.uz"`, ...).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub(crate) fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

impl std::ops::Index<&str> for Bound {
    type Output = Var;
    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

pub type GradMap = BTreeMap<String, Array2<f64>>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)` where fan-in is the column count.
    pub fn init_weight<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        let std = 1.0 / (cols.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        self.insert(name, Array2::from_shape_fn((rows, cols), |_| normal.sample(rng)));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    /// Binds every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Binds every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| false)
    }

    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every bound tensor, zero where nothing flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> GradMap {
        self.tensors
            .iter()
            .filter_map(|(k, v)| {
                let var = bound.try_get(k)?;
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(v.dim()));
                Some((k.clone(), g))
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Restricts to the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: GradMap,
    v: GradMap,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: GradMap::new(),
            v: GradMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let sq = tape.square(b["x"]);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss);
            let g = params.collect_grads(&b, &grads);
            opt.step(&mut params, &g);
        }
        assert!(params.get("x").unwrap().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let mut params = ParamSet::new();
        params.insert("x", array![[1.5]]);
        let before = params.digest();
        let mut opt = Adam::new(0.0);
        let mut g = GradMap::new();
        g.insert("x".into(), array![[2.0]]);
        opt.step(&mut params, &g);
        assert_eq!(before, params.digest());
    }

    #[test]
    fn frozen_binding_yields_no_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", array![[1.0, 2.0]]);
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let x = tape.leaf(array![[1.0, 1.0]]);
        let y = tape.mul(b["w"], x);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert!(grads.get(b["w"]).is_none());
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 2.0]]);
    }
}
