//! Scene relighting: each stage predicts a three-channel illumination map
//! `S(x)` in (0, 1) and returns `x ⊗ S(x)`.

use ndarray::{ArrayD, IxDyn};

use super::{Builder, SRSM_SLOTS};
use crate::error::Result;
use crate::ops::{Activation, Block, Conv, Operator, OperatorSpec, POOL_WINDOW};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SrsmStage {
    head: Conv,
    slots: Vec<Block>,
    /// Pooling attention after the first two slots.
    attention: Vec<Conv>,
    tail: Conv,
    activation: Activation,
}

impl SrsmStage {
    fn new(b: &Builder, module: &str, channels: usize) -> Result<Self> {
        let scope = b.weights.sub(module);
        let head = Conv::same(&scope.sub("head"), 3, channels, 3);
        let mut slots = Vec::with_capacity(SRSM_SLOTS);
        let mut attention = Vec::new();
        for s in 0..SRSM_SLOTS {
            let act = b.activation;
            slots.push(b.block(module, s, |n, sc| Operator::new(OperatorSpec::new(n, channels, channels)?, sc, act))?);
            if s + 1 < SRSM_SLOTS {
                attention.push(Conv::same(&scope.sub(format!("attn{s}")), 2 * channels, channels, 3));
            }
        }
        let tail = Conv::same(&scope.sub("tail"), channels, 3, 3);
        // Maps start near one (sigmoid(3) ~ 0.95) so a fresh stage barely
        // dims its input.
        tail.bias.set(ArrayD::from_elem(IxDyn(&[3]), 3.0));
        Ok(SrsmStage { head, slots, attention, tail, activation: b.activation })
    }

    /// The illumination map of this stage for input `x`.
    pub fn illumination(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.activation.apply(&self.head.forward(x));
        for (s, slot) in self.slots.iter().enumerate() {
            h = slot.forward(&h)?;
            if let Some(att) = self.attention.get(s) {
                let pooled = Tensor::concat(&[&h.max_pool2d_same(POOL_WINDOW), &h.avg_pool2d_same(POOL_WINDOW)], 1);
                h = h.mul(&att.forward(&pooled).sigmoid());
            }
        }
        Ok(self.tail.forward(&h).sigmoid())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let map = self.illumination(x)?;
        Ok((x.mul(&map), map))
    }

    pub fn tail(&self) -> &Conv {
        &self.tail
    }

    pub fn blocks(&self) -> Vec<&Block> {
        self.slots.iter().collect()
    }
}

/// A cascade of relighting stages with independent weights.
#[derive(Debug, Clone)]
pub struct Srsm {
    pub stages: Vec<SrsmStage>,
}

impl Srsm {
    pub(crate) fn new(b: &Builder, branch: &str, cascade: usize, channels: usize) -> Result<Self> {
        let stages = (0..cascade).map(|t| SrsmStage::new(b, &format!("{branch}.stage{t}"), channels)).collect::<Result<_>>()?;
        Ok(Srsm { stages })
    }

    /// `x_t = x_{t-1} ⊗ S_t(x_{t-1})` with `x_0 = img`; returns the last
    /// stage's output and every map.
    pub fn forward(&self, img: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = img.clone();
        let mut maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, map) = stage.forward(&x)?;
            x = next;
            maps.push(map);
        }
        Ok((x, maps))
    }

    pub fn blocks(&self) -> Vec<&Block> {
        self.stages.iter().flat_map(SrsmStage::blocks).collect()
    }
}
