//! Gradient-descent optimizers and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{ArrayD, IxDyn, Zip};

use crate::param::Var;
use crate::tensor::Gradients;

/// Cosine annealing from `start` to `end` over `total` steps; step 0 yields
/// `start` and step `total - 1` yields `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(start: f64, end: f64, total: usize) -> Self {
        CosineSchedule { start, end, total }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.total <= 1 {
            return self.start;
        }
        let t = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        self.end + 0.5 * (self.start - self.end) * (1.0 + (PI * t).cos())
    }
}

/// Rescales `grads` so the global L2 norm over `vars` is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(vars: &[Var], grads: &mut Gradients, max_norm: f64) -> f64 {
    let sq: f64 = vars
        .iter()
        .filter_map(|v| grads.get(&v.tensor()))
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Named optimizer state, used for checkpointing.
pub type OptimState = Vec<(String, ArrayD<f64>)>;

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, vars: &[Var], grads: &Gradients, lr: f64) {
        for var in vars {
            let Some(g) = grads.get(&var.tensor()) else { continue };
            let g = g.value();
            let vel = self
                .velocity
                .entry(var.name().to_string())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            Zip::from(&mut *vel).and(g).for_each(|v, &gi| *v = self.momentum * *v + gi);
            let vel = vel.clone();
            var.update(|w| Zip::from(w).and(&vel).for_each(|w, &v| *w -= lr * v));
        }
    }

    pub fn state(&self) -> OptimState {
        self.velocity.iter().map(|(k, v)| (format!("velocity.{k}"), v.clone())).collect()
    }

    pub fn load_state(&mut self, state: &OptimState) {
        self.velocity.clear();
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("velocity.") {
                self.velocity.insert(name.to_string(), v.clone());
            }
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, vars: &[Var], grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for var in vars {
            let Some(g) = grads.get(&var.tensor()) else { continue };
            let g = g.value();
            let name = var.name().to_string();
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            Zip::from(&mut *m).and(g).for_each(|m, &gi| *m = b1 * *m + (1.0 - b1) * gi);
            let v = self.v.entry(name).or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            Zip::from(&mut *v).and(g).for_each(|v, &gi| *v = b2 * *v + (1.0 - b2) * gi * gi);
            let (m, v) = (m.clone(), v.clone());
            var.update(|w| {
                Zip::from(w)
                    .and(&m)
                    .and(&v)
                    .for_each(|w, &m, &v| *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
            });
        }
    }

    pub fn state(&self) -> OptimState {
        let mut out = vec![("t".to_string(), ndarray::arr0(self.t as f64).into_dyn())];
        out.extend(self.m.iter().map(|(k, v)| (format!("m.{k}"), v.clone())));
        out.extend(self.v.iter().map(|(k, v)| (format!("v.{k}"), v.clone())));
        out
    }

    pub fn load_state(&mut self, state: &OptimState) {
        self.m.clear();
        self.v.clear();
        for (k, val) in state {
            if k == "t" {
                self.t = val.iter().next().copied().unwrap_or(0.0) as u64;
            } else if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), val.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), val.clone());
            }
        }
    }
}
