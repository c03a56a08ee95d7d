//! Parameter storage, initialization helpers, and the AdamW optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// Standard-normal sample via Box-Muller (keeps us off rand_distr and makes
/// the draw sequence explicit for reproducibility).
pub fn randn_scalar(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| randn_scalar(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Kaiming-style init for a linear / conv weight with the given fan-in.
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    randn(rng, shape) * std
}

/// Named f64 parameter blocks plus AdamW moment buffers.
///
/// BTreeMap keeps iteration order deterministic, which the checkpoint
/// round-trip and seed-determinism contracts rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub adam_m: BTreeMap<String, ArrayD<f64>>,
    pub adam_v: BTreeMap<String, ArrayD<f64>>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: ArrayD<f64>) {
        self.adam_m.insert(name.to_string(), ArrayD::zeros(data.raw_dim()));
        self.adam_v.insert(name.to_string(), ArrayD::zeros(data.raw_dim()));
        self.params.insert(name.to_string(), data);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, data: ArrayD<f64>) {
        *self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")) = data;
    }

    /// Bind every parameter onto a tape as a differentiable input.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, data) in &self.params {
            vars.insert(name.clone(), tape.input(data.clone()));
        }
        Bound { vars }
    }

    /// Decoupled-weight-decay Adam update from the gradients on `tape`.
    pub fn adamw_step(&mut self, tape: &Tape, bound: &Bound, lr: f64, weight_decay: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - B1.powi(t);
        let bc2 = 1.0 - B2.powi(t);
        for (name, var) in &bound.vars {
            let Some(g) = tape.grad(*var) else { continue };
            let m = self.adam_m.get_mut(name).unwrap();
            let v = self.adam_v.get_mut(name).unwrap();
            let p = self.params.get_mut(name).unwrap();
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mi, &gi| {
                *mi = B1 * *mi + (1.0 - B1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vi, &gi| {
                *vi = B2 * *vi + (1.0 - B2) * gi * gi;
            });
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mh = mi / bc1;
                    let vh = vi / bc2;
                    *pi -= lr * (mh / (vh.sqrt() + EPS) + weight_decay * *pi);
                });
        }
    }
}

/// Parameters bound to one tape for a single forward/backward pass.
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// `x (n, in) @ W (in, out) + b`, parameters looked up by prefix.
pub fn linear(tape: &Tape, bound: &Bound, prefix: &str, x: Var) -> Var {
    let w = bound.var(&format!("{prefix}.w"));
    let b = bound.var(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

/// Register linear-layer parameters.
pub fn linear_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, din: usize, dout: usize) {
    store.insert(&format!("{prefix}.w"), kaiming(rng, &[din, dout], din));
    store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[dout])));
}

/// Register conv-layer parameters (weight `(cout, cin, k, k)` + bias).
pub fn conv_init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
    store.insert(&format!("{prefix}.w"), kaiming(rng, &[cout, cin, k, k], cin * k * k));
    store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[cout])));
}

pub fn conv2d(tape: &Tape, bound: &Bound, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = bound.var(&format!("{prefix}.w"));
    let b = bound.var(&format!("{prefix}.b"));
    tape.conv2d(x, w, Some(b), stride, pad)
}
