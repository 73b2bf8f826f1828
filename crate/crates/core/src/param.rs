//! Named trainable parameters.
//!
//! A [`Var`] owns the current leaf tensor of a parameter; optimizers replace
//! that leaf after each step. Parameters are created through a [`Scope`] so
//! every one gets a stable hierarchical name (used by checkpoints and to move
//! weights between a super-network and its discretized networks).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct VarInner {
    name: String,
    tensor: RefCell<Tensor>,
}

#[derive(Clone)]
pub struct Var(Rc<VarInner>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.0.name, self.shape())
    }
}

impl Var {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Var(Rc::new(VarInner { name: name.into(), tensor: RefCell::new(Tensor::leaf(value, true)) }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// The current leaf; gradients with respect to it are reported by
    /// [`crate::tensor::backward`].
    pub fn tensor(&self) -> Tensor {
        self.0.tensor.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.tensor.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.tensor.borrow().numel()
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.0.tensor.borrow().value().clone()
    }

    pub fn set(&self, value: ArrayD<f64>) {
        assert_eq!(value.shape(), self.shape().as_slice(), "shape change for parameter {}", self.name());
        *self.0.tensor.borrow_mut() = Tensor::leaf(value, true);
    }

    pub fn update(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        let mut v = self.value();
        f(&mut v);
        self.set(v);
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
}

struct StoreInner {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

/// An ordered collection of parameters with a seeded initializer.
#[derive(Clone)]
pub struct ParamStore(Rc<RefCell<StoreInner>>);

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore(Rc::new(RefCell::new(StoreInner {
            vars: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })))
    }

    pub fn root(&self) -> Scope {
        Scope { store: self.clone(), prefix: String::new() }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.0.borrow().vars.clone()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.0.borrow();
        inner.index.get(name).map(|&i| inner.vars[i].clone())
    }

    pub fn len(&self) -> usize {
        self.0.borrow().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_params(&self) -> usize {
        self.0.borrow().vars.iter().map(Var::numel).sum()
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Var {
        let mut inner = self.0.borrow_mut();
        assert!(!inner.index.contains_key(&name), "parameter `{name}` registered twice");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.random_range(-b..=b)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
        };
        let var = Var::new(name.clone(), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
        let idx = inner.vars.len();
        inner.vars.push(var.clone());
        inner.index.insert(name, idx);
        var
    }

    /// Named values in registration order.
    pub fn snapshot(&self) -> Vec<(String, ArrayD<f64>)> {
        self.0.borrow().vars.iter().map(|v| (v.name().to_string(), v.value())).collect()
    }

    /// Loads every named value; all names must exist with matching shapes.
    pub fn load(&self, values: &[(String, ArrayD<f64>)]) -> Result<()> {
        for (name, v) in values {
            let var = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if var.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    var.shape(),
                    v.shape()
                )));
            }
            var.set(v.clone());
        }
        Ok(())
    }

    /// Copies values of identically named parameters from `other`; returns
    /// how many were copied.
    pub fn copy_matching(&self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for var in self.vars() {
            if let Some(src) = other.get(var.name()) {
                if src.shape() == var.shape() {
                    var.set(src.value());
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// A naming prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn sub(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Scope { store: self.store.clone(), prefix }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Var {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.create(full, shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
