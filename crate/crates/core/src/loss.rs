//! Training objectives: L1 intensity, Sobel-gradient and WGAN-GP adversarial
//! terms, and their weighted total.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Conv;
use crate::param::{Scope, Var};
use crate::tensor::{grad, ConvParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta1: 0.75, beta2: 0.05, gp_weight: 10.0 }
    }
}

impl LossWeights {
    pub fn intensity_only() -> Self {
        LossWeights { beta1: 0.0, beta2: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.gp_weight < 0.0 {
            return Err(Error::InvalidParameter(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn check_pair(y: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if y.shape() != gt.shape() || y.ndim() != 4 {
        return Err(Error::LossArity(format!("output {:?} vs target {:?}", y.shape(), gt.shape())));
    }
    let s = y.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// `Σ|y − gt| / (H·W)`, summed over channels and averaged over the batch.
pub fn intensity_loss(y: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = check_pair(y, gt)?;
    Ok(y.sub(gt).abs().sum_all().scale(1.0 / (b * h * w) as f64))
}

fn sobel_kernel() -> Tensor {
    #[rustfmt::skip]
    let k = vec![
        -1.0, 0.0, 1.0,
        -2.0, 0.0, 2.0,
        -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0,
         0.0,  0.0,  0.0,
         1.0,  2.0,  1.0,
    ];
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[2, 1, 3, 3]), k).expect("kernel shape"))
}

/// Per-channel Sobel responses `[B, C, 2, H, W]` (horizontal then vertical)
/// with reflect padding.
pub fn sobel(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let planes = x.reshape(&[s[0] * s[1], 1, s[2], s[3]]).reflect_pad(1);
    planes.conv2d(&sobel_kernel(), ConvParams::default()).reshape(&[s[0], s[1], 2, s[2], s[3]])
}

/// `sqrt(Gx² + Gy²)` per channel, `[B, C, H, W]`.
pub fn sobel_magnitude(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let g = sobel(x);
    let gx = g.narrow(2, 0, 1).reshape(&s);
    let gy = g.narrow(2, 1, 1).reshape(&s);
    gx.square().add(&gy.square()).sqrt()
}

/// Batch mean of `‖|∇y| − |∇gt|‖₂ / (H·W)`.
pub fn gradient_loss(y: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = check_pair(y, gt)?;
    let diff = sobel_magnitude(y).sub(&sobel_magnitude(gt));
    Ok(diff.square().sum_per_item().sqrt().sum_all().scale(1.0 / (b * h * w) as f64))
}

/// A critic producing a score tensor whose leading axis is the batch.
pub trait Critic {
    fn score(&self, x: &Tensor) -> Result<Tensor>;
    fn vars(&self) -> Vec<Var>;
}

/// A patch discriminator: four stride-2 4×4 convolutions with leaky rectifiers
/// and a 3×3 output convolution producing a one-channel score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<Conv>,
    out: Conv,
}

impl Discriminator {
    /// Layer widths are `base·{1, 2, 4, 8}`.
    pub fn new(scope: &Scope, base: usize) -> Self {
        let down = ConvParams { stride: 2, padding: 1, dilation: 1 };
        let mut cin = 3;
        let layers = (0..4)
            .map(|i| {
                let cout = base << i;
                let c = Conv::new(&scope.sub(format!("layer{i}")), cin, cout, 4, down);
                cin = cout;
                c
            })
            .collect();
        let out = Conv::same(&scope.sub("out"), cin, 1, 3);
        Discriminator { layers, out }
    }
}

impl Critic for Discriminator {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < 16 || s[3] < 16 {
            return Err(Error::LossArity(format!("discriminator needs [B, 3, >=16, >=16] input, got {s:?}")));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h).leaky_relu(0.2);
        }
        Ok(self.out.forward(&h))
    }

    fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(Conv::vars).collect();
        v.extend(self.out.vars());
        v
    }
}

/// `−mean(D(y))`.
pub fn generator_loss(d: &dyn Critic, y: &Tensor) -> Result<Tensor> {
    Ok(d.score(y)?.mean_all().neg())
}

/// `mean((‖∇_ŷ D(ŷ)‖₂ − 1)²)` at `ŷ = u·gt + (1−u)·y`, one `u` per sample.
/// The returned tensor is differentiable in the critic's weights.
pub fn gradient_penalty(d: &dyn Critic, y: &Tensor, gt: &Tensor, u: &[f64]) -> Result<Tensor> {
    let (b, _, _, _) = check_pair(y, gt)?;
    if u.len() != b {
        return Err(Error::LossArity(format!("{} interpolation weights for a batch of {b}", u.len())));
    }
    let ut = Tensor::from_vec(&[b, 1, 1, 1], u.to_vec());
    let mix = gt.detach().mul(&ut).add(&y.detach().mul(&ut.neg().add_scalar(1.0)));
    let yhat = Tensor::leaf(mix.value().clone(), true);
    let score = d.score(&yhat)?.sum_all();
    let g = grad(&score, &[&yhat], true)?.remove(0);
    let norm = g.square().sum_per_item().sqrt();
    let penalty = norm.add_scalar(-1.0).square().mean_all();
    if !penalty.all_finite() {
        return Err(Error::GpDivergence);
    }
    Ok(penalty)
}

/// `mean(D(y)) − mean(D(gt)) + gp_weight · penalty`, with `y` detached.
pub fn discriminator_loss(d: &dyn Critic, y: &Tensor, gt: &Tensor, gp_weight: f64, u: &[f64]) -> Result<Tensor> {
    let gap = d.score(&y.detach())?.mean_all().sub(&d.score(&gt.detach())?.mean_all());
    Ok(gap.add(&gradient_penalty(d, y, gt, u)?.scale(gp_weight)))
}

/// Draws one interpolation weight per sample.
pub fn sample_u(batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..batch).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// `(gen_loss, disc_loss)`.
pub fn adversarial_losses(
    d: &dyn Critic,
    y: &Tensor,
    gt: &Tensor,
    gp_weight: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let u = sample_u(y.shape()[0], rng);
    Ok((generator_loss(d, y)?, discriminator_loss(d, y, gt, gp_weight, &u)?))
}

/// Per-term values of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_int: f64,
    pub l_gra: f64,
    pub l_dis: f64,
    pub l_total: f64,
}

/// The generator objective as a differentiable tensor plus its report.
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

/// `ℓ_int + β1·ℓ_gra + β2·(−mean D(y))`. Terms with a zero weight are not
/// evaluated; the adversarial term needs a critic when `beta2 > 0`.
pub fn total_loss(y: &Tensor, gt: &Tensor, d: Option<&dyn Critic>, w: &LossWeights) -> Result<Objective> {
    w.validate()?;
    let l_int = intensity_loss(y, gt)?;
    let mut total = l_int.clone();
    let mut report = LossReport { l_int: l_int.item(), l_gra: 0.0, l_dis: 0.0, l_total: 0.0 };
    if w.beta1 > 0.0 {
        let l_gra = gradient_loss(y, gt)?;
        report.l_gra = l_gra.item();
        total = total.add(&l_gra.scale(w.beta1));
    }
    if w.beta2 > 0.0 {
        let d = d.ok_or_else(|| Error::LossArity("adversarial weight set without a critic".into()))?;
        let l_dis = generator_loss(d, y)?;
        report.l_dis = l_dis.item();
        total = total.add(&l_dis.scale(w.beta2));
    }
    report.l_total = total.item();
    Ok(Objective { total, report })
}
