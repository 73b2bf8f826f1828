//! Detail repletion: residual refinement followed by a coarse-image head
//! divided by an illumination head.

use ndarray::{ArrayD, IxDyn};

use super::{Builder, DRM_SLOTS};
use crate::error::Result;
use crate::ops::{Block, Conv, Operator, OperatorSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Drm {
    slots: Vec<Block>,
    coarse: Conv,
    illumination: Conv,
    pub epsilon: f64,
}

/// `clip(c ⊘ max(r, ε), 0, 1)`.
pub fn drm_combine(coarse: &Tensor, illumination: &Tensor, epsilon: f64) -> Tensor {
    coarse.div(&illumination.clamp_min(epsilon)).clamp(0.0, 1.0)
}

impl Drm {
    pub(crate) fn new(b: &Builder, channels: usize, epsilon: f64) -> Result<Self> {
        let act = b.activation;
        let slots = (0..DRM_SLOTS)
            .map(|s| b.block("drm", s, |n, sc| Operator::new(OperatorSpec::new(n, channels, channels)?, sc, act)))
            .collect::<Result<_>>()?;
        let scope = b.weights.sub("drm");
        let coarse = Conv::same(&scope.sub("coarse"), channels, 3, 3);
        let illumination = Conv::same(&scope.sub("illumination"), channels, 3, 3);
        // Start at a flat mid-grey (c = 0.25 over r = 0.5) so the clipped
        // output is not saturated at initialisation.
        coarse.bias.set(ArrayD::from_elem(IxDyn(&[3]), 0.25));
        for w in [&coarse.weight, &illumination.weight] {
            w.set(ArrayD::zeros(IxDyn(&w.shape())));
        }
        Ok(Drm { slots, coarse, illumination, epsilon })
    }

    pub fn blocks(&self) -> Vec<&Block> {
        self.slots.iter().collect()
    }

    pub fn coarse(&self) -> &Conv {
        &self.coarse
    }

    pub fn illumination(&self) -> &Conv {
        &self.illumination
    }

    /// Refined features, the coarse image `c` and the illumination `r`.
    pub fn heads(&self, f_a: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = f_a.clone();
        for s in &self.slots {
            h = s.forward(&h)?;
        }
        Ok((self.coarse.forward(&h), self.illumination.forward(&h).sigmoid()))
    }

    pub fn forward(&self, f_a: &Tensor) -> Result<Tensor> {
        let (c, r) = self.heads(f_a)?;
        Ok(drm_combine(&c, &r, self.epsilon))
    }
}
