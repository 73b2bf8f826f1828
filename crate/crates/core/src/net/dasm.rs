//! Pyramid deformable alignment: `A(F_mov, F_ref) + F_ref`.

use super::Builder;
use crate::error::{Error, Result};
use crate::ops::{Activation, Block, Conv, Operator, OperatorSpec};
use crate::tensor::{ConvParams, Tensor};

#[derive(Debug, Clone)]
pub struct Dasm {
    /// Stride-2 encoders between pyramid levels, shared by both inputs.
    down: Vec<Conv>,
    /// One deformable block per level, finest first.
    levels: Vec<Block>,
    proj: Conv,
    activation: Activation,
}

impl Dasm {
    pub(crate) fn new(b: &Builder, module: &str, levels: usize, channels: usize) -> Result<Self> {
        let scope = b.weights.sub(module);
        let stride2 = ConvParams { stride: 2, padding: 1, dilation: 1 };
        let down = (1..levels).map(|l| Conv::new(&scope.sub(format!("down{l}")), channels, channels, 3, stride2)).collect();
        let act = b.activation;
        let blocks = (0..levels)
            .map(|l| {
                // The coarsest level is guided by the reference alone, finer
                // ones also see the upsampled alignment from below.
                let guide = if l + 1 == levels { channels } else { 2 * channels };
                b.block(module, l, |n, sc| Operator::deformable(OperatorSpec::new(n, channels, channels)?, guide, sc, act))
            })
            .collect::<Result<_>>()?;
        let proj = Conv::same(&scope.sub("proj"), channels, channels, 3);
        Ok(Dasm { down, levels: blocks, proj, activation: act })
    }

    pub fn proj(&self) -> &Conv {
        &self.proj
    }

    pub fn blocks(&self) -> Vec<&Block> {
        self.levels.iter().collect()
    }

    fn pyramid(&self, f: &Tensor) -> Vec<Tensor> {
        let mut out = vec![f.clone()];
        for d in &self.down {
            let next = self.activation.apply(&d.forward(out.last().expect("nonempty")));
            out.push(next);
        }
        out
    }

    /// Aligns `f_mov` onto `f_ref` and adds the reference.
    pub fn forward(&self, f_mov: &Tensor, f_ref: &Tensor) -> Result<Tensor> {
        self.forward_cued(f_mov, f_ref, f_mov, f_ref)
    }

    /// As [`Dasm::forward`], but offsets are predicted from the cue features
    /// while `f_mov` is what gets sampled.
    pub fn forward_cued(&self, f_mov: &Tensor, f_ref: &Tensor, cue_mov: &Tensor, cue_ref: &Tensor) -> Result<Tensor> {
        for (name, t) in [("reference", f_ref), ("moving cue", cue_mov), ("reference cue", cue_ref)] {
            if t.shape() != f_mov.shape() {
                return Err(Error::AlignmentArity(format!("moving {:?} vs {name} {:?}", f_mov.shape(), t.shape())));
            }
        }
        let scale = 1 << self.down.len();
        if f_mov.ndim() != 4 || f_mov.shape()[2] % scale != 0 || f_mov.shape()[3] % scale != 0 {
            return Err(Error::AlignmentArity(format!(
                "features {:?} not divisible by the pyramid scale {scale}",
                f_mov.shape()
            )));
        }
        let mov = self.pyramid(f_mov);
        let same_cue = cue_mov.id() == f_mov.id() && cue_ref.id() == f_ref.id();
        let (cm, cr) = if same_cue { (mov.clone(), self.pyramid(f_ref)) } else { (self.pyramid(cue_mov), self.pyramid(cue_ref)) };
        let mut aligned: Option<Tensor> = None;
        for l in (0..self.levels.len()).rev() {
            let guide = match &aligned {
                None => cr[l].clone(),
                Some(a) => Tensor::concat(&[&cr[l], &a.upsample2x()], 1),
            };
            aligned = Some(self.levels[l].forward_deformable(&mov[l], &cm[l], &guide)?);
        }
        let a = aligned.expect("at least two levels");
        Ok(self.proj.forward(&a).add(f_ref))
    }
}
