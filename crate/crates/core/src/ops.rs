//! The searchable operator set and softmax-relaxed search cells.
//!
//! Every operator keeps the spatial size (stride 1, symmetric padding), so
//! any choice of operators composes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Init, Scope, Var};
use crate::tensor::{ConvParams, Tensor};

/// All operator names, in canonical order.
pub const ALL_OPERATORS: [&str; 18] = [
    "C-1", "C-3", "C-5", "C-7", "DC-3", "DC-5", "DC-7", "RC-3", "RC-5", "RC-7", "RDC-3", "RDC-5", "RDC-7", "DeC-3",
    "DeC-5", "DeC-7", "MaxPool", "AvgPool",
];

/// Candidates of the relighting slots.
pub const SRSM_CANDIDATES: [&str; 7] = ["C-1", "C-3", "C-5", "C-7", "DC-3", "DC-5", "DC-7"];
/// Candidates of the detail-repletion slots.
pub const DRM_CANDIDATES: [&str; 6] = ["RC-3", "RC-5", "RC-7", "RDC-3", "RDC-5", "RDC-7"];
/// Candidates of the alignment slots.
pub const DASM_CANDIDATES: [&str; 3] = ["DeC-3", "DeC-5", "DeC-7"];

/// Dilation used by every dilated operator.
pub const DILATION: usize = 2;

/// Window of the pooling operators.
pub const POOL_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    C,
    DC,
    RC,
    RDC,
    DeC,
    MaxPool,
    AvgPool,
}

impl OpKind {
    fn prefix(self) -> &'static str {
        match self {
            OpKind::C => "C",
            OpKind::DC => "DC",
            OpKind::RC => "RC",
            OpKind::RDC => "RDC",
            OpKind::DeC => "DeC",
            OpKind::MaxPool => "MaxPool",
            OpKind::AvgPool => "AvgPool",
        }
    }

    pub fn is_residual(self) -> bool {
        matches!(self, OpKind::RC | OpKind::RDC)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OpKind::MaxPool | OpKind::AvgPool)
    }
}

/// Kernel and dilation of an operator, without channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpName {
    pub kind: OpKind,
    pub kernel: usize,
    pub dilation: usize,
}

impl fmt::Display for OpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_pool() {
            f.write_str(self.kind.prefix())
        } else {
            write!(f, "{}-{}", self.kind.prefix(), self.kernel)
        }
    }
}

impl FromStr for OpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownOperator(s.to_string());
        let (kind, kernel) = match s {
            "MaxPool" => (OpKind::MaxPool, POOL_WINDOW),
            "AvgPool" => (OpKind::AvgPool, POOL_WINDOW),
            _ => {
                let (p, k) = s.split_once('-').ok_or_else(unknown)?;
                let kind = match p {
                    "C" => OpKind::C,
                    "DC" => OpKind::DC,
                    "RC" => OpKind::RC,
                    "RDC" => OpKind::RDC,
                    "DeC" => OpKind::DeC,
                    _ => return Err(unknown()),
                };
                (kind, k.parse().map_err(|_| unknown())?)
            }
        };
        let dilation = if matches!(kind, OpKind::DC | OpKind::RDC) { DILATION } else { 1 };
        let name = OpName { kind, kernel, dilation };
        if !ALL_OPERATORS.contains(&name.to_string().as_str()) {
            return Err(unknown());
        }
        Ok(name)
    }
}

/// A fully specified operator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorSpec {
    pub kind: OpKind,
    pub kernel: usize,
    pub dilation: usize,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl OperatorSpec {
    pub fn new(name: &str, channels_in: usize, channels_out: usize) -> Result<Self> {
        let n: OpName = name.parse()?;
        let spec = OperatorSpec { kind: n.kind, kernel: n.kernel, dilation: n.dilation, channels_in, channels_out };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> String {
        OpName { kind: self.kind, kernel: self.kernel, dilation: self.dilation }.to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("{}: {m}", self.name())));
        match self.kind {
            OpKind::DC | OpKind::RDC if self.dilation < 2 => return bad("dilated operators need dilation >= 2".into()),
            OpKind::C | OpKind::RC | OpKind::DeC if self.dilation != 1 => return bad("dilation must be 1".into()),
            OpKind::DeC if ![3, 5, 7].contains(&self.kernel) => return bad("kernel must be 3, 5 or 7".into()),
            _ => {}
        }
        if ![1, 3, 5, 7].contains(&self.kernel) {
            return bad(format!("kernel {} not in {{1, 3, 5, 7}}", self.kernel));
        }
        if (self.kind.is_residual() || self.kind.is_pool() || self.kind == OpKind::DeC)
            && self.channels_in != self.channels_out
        {
            return Err(Error::OperatorArity(format!(
                "{} maps {} channels to {}; it must preserve the channel count",
                self.name(),
                self.channels_in,
                self.channels_out
            )));
        }
        Ok(())
    }

    /// Multiply-accumulates per output pixel, a hardware-independent cost proxy.
    pub fn macs_per_pixel(&self) -> usize {
        let conv = self.channels_in * self.channels_out * self.kernel * self.kernel;
        match self.kind {
            OpKind::MaxPool | OpKind::AvgPool => self.channels_in * self.kernel * self.kernel,
            OpKind::DeC => conv + 2 * self.channels_in * 2 * self.kernel * self.kernel * 9,
            _ => conv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Linear,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.2)
    }
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match *self {
            Activation::LeakyRelu(s) => x.leaky_relu(s),
            Activation::Linear => x.clone(),
        }
    }
}

/// A convolution layer with bias: `conv(x, w) + b`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub params: ConvParams,
}

impl Conv {
    pub fn new(scope: &Scope, cin: usize, cout: usize, kernel: usize, params: ConvParams) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv {
            weight: scope.var("weight", &[cout, cin, kernel, kernel], Init::FanIn(fan_in)),
            bias: scope.var("bias", &[cout], Init::Zeros),
            params,
        }
    }

    /// A stride-1 size-preserving convolution.
    pub fn same(scope: &Scope, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv::new(scope, cin, cout, kernel, ConvParams::same(kernel, 1))
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight.tensor(), self.params).add_channel_bias(&self.bias.tensor())
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// One instantiated operator with its parameters.
#[derive(Debug, Clone)]
pub struct Operator {
    pub spec: OperatorSpec,
    pub activation: Activation,
    conv: Option<Conv>,
    /// Offset predictor of deformable operators; its input is the concatenation
    /// of the sampled features and the guide.
    offset: Option<Conv>,
}

impl Operator {
    /// Builds an operator. Deformable operators use the input itself as the
    /// width of their guide; see [`Operator::deformable`] for other guides.
    pub fn new(spec: OperatorSpec, scope: &Scope, activation: Activation) -> Result<Self> {
        Operator::with_guide(spec, spec.channels_in, scope, activation)
    }

    /// A deformable operator whose offsets are predicted from
    /// `concat(x, guide)` with `guide` having `guide_channels` channels.
    pub fn deformable(spec: OperatorSpec, guide_channels: usize, scope: &Scope, activation: Activation) -> Result<Self> {
        if spec.kind != OpKind::DeC {
            return Err(Error::InvalidParameter(format!("{} is not deformable", spec.name())));
        }
        Operator::with_guide(spec, guide_channels, scope, activation)
    }

    fn with_guide(spec: OperatorSpec, guide_channels: usize, scope: &Scope, activation: Activation) -> Result<Self> {
        spec.validate()?;
        let (conv, offset) = match spec.kind {
            OpKind::MaxPool | OpKind::AvgPool => (None, None),
            OpKind::DeC => {
                let k = spec.kernel;
                let offset = Conv {
                    weight: scope.sub("offset").var("weight", &[2 * k * k, spec.channels_in + guide_channels, 3, 3], Init::Zeros),
                    bias: scope.sub("offset").var("bias", &[2 * k * k], Init::Zeros),
                    params: ConvParams::same(3, 1),
                };
                let conv = Conv::new(scope, spec.channels_in, spec.channels_out, k, ConvParams::same(k, 1));
                (Some(conv), Some(offset))
            }
            _ => {
                let p = ConvParams::same(spec.kernel, spec.dilation);
                (Some(Conv::new(scope, spec.channels_in, spec.channels_out, spec.kernel, p)), None)
            }
        };
        Ok(Operator { spec, activation, conv, offset })
    }

    pub fn name(&self) -> String {
        self.spec.name()
    }

    pub fn conv(&self) -> Option<&Conv> {
        self.conv.as_ref()
    }

    pub fn offset_conv(&self) -> Option<&Conv> {
        self.offset.as_ref()
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.conv.iter().flat_map(Conv::vars).collect();
        v.extend(self.offset.iter().flat_map(Conv::vars));
        v
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 4 || x.shape()[1] != self.spec.channels_in {
            return Err(Error::OperatorArity(format!(
                "{} expects {} input channels, got shape {:?}",
                self.name(),
                self.spec.channels_in,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Applies a non-deformable operator.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let conv = || self.conv.as_ref().expect("convolutional operator has weights");
        Ok(match self.spec.kind {
            OpKind::MaxPool => x.max_pool2d_same(self.spec.kernel),
            OpKind::AvgPool => x.avg_pool2d_same(self.spec.kernel),
            OpKind::C | OpKind::DC => self.activation.apply(&conv().forward(x)),
            OpKind::RC | OpKind::RDC => x.add(&self.activation.apply(&conv().forward(x))),
            OpKind::DeC => return self.forward_guided(x, x),
        })
    }

    /// The offset field `[N, 2k², H, W]` a deformable operator predicts.
    pub fn offsets(&self, x: &Tensor, guide: &Tensor) -> Result<Tensor> {
        let off = self
            .offset
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("{} has no offset predictor", self.name())))?;
        self.check_input(x)?;
        let expect = off.in_channels() - self.spec.channels_in;
        if guide.ndim() != 4
            || guide.shape()[0] != x.shape()[0]
            || guide.shape()[2..] != x.shape()[2..]
            || guide.shape()[1] != expect
        {
            return Err(Error::AlignmentArity(format!(
                "{}: input {:?} and guide {:?} (expected {expect} guide channels)",
                self.name(),
                x.shape(),
                guide.shape()
            )));
        }
        Ok(off.forward(&Tensor::concat(&[x, guide], 1)))
    }

    /// Applies an operator that may look at a guide. Deformable operators
    /// predict their offsets from `concat(x, guide)`; others ignore the guide.
    pub fn forward_guided(&self, x: &Tensor, guide: &Tensor) -> Result<Tensor> {
        self.forward_deformable(x, x, guide)
    }

    /// Samples `x` at offsets predicted from `concat(cue, guide)`, where `cue`
    /// has the shape of `x`. Non-deformable operators apply to `x` alone.
    pub fn forward_deformable(&self, x: &Tensor, cue: &Tensor, guide: &Tensor) -> Result<Tensor> {
        if self.spec.kind != OpKind::DeC {
            return self.forward(x);
        }
        if cue.shape() != x.shape() {
            return Err(Error::AlignmentArity(format!("{}: input {:?} vs cue {:?}", self.name(), x.shape(), cue.shape())));
        }
        let offsets = self.offsets(cue, guide)?;
        let conv = self.conv.as_ref().expect("deformable operator has weights");
        let y = x.deform_conv2d(&offsets, &conv.weight.tensor(), conv.params).add_channel_bias(&conv.bias.tensor());
        Ok(self.activation.apply(&y))
    }
}

/// Deformable convolution of `x` with offsets predicted from `(x, reference)`.
pub fn deformable_conv(op: &Operator, x: &Tensor, reference: &Tensor) -> Result<Tensor> {
    if op.spec.kind != OpKind::DeC {
        return Err(Error::InvalidParameter(format!("{} is not deformable", op.name())));
    }
    if x.shape() != reference.shape() {
        return Err(Error::AlignmentArity(format!("input {:?} vs reference {:?}", x.shape(), reference.shape())));
    }
    op.forward_guided(x, reference)
}

/// Architecture logits of one search block.
#[derive(Debug, Clone)]
pub struct ArchWeights {
    pub logits: Var,
    pub trainable: bool,
}

impl ArchWeights {
    pub fn probs(&self) -> Tensor {
        self.logits.tensor().softmax()
    }

    pub fn len(&self) -> usize {
        self.logits.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A search block: candidate operators mixed by `softmax(alpha)`.
#[derive(Debug, Clone)]
pub struct SearchCell {
    pub block_id: usize,
    pub tag: String,
    pub candidates: Vec<Operator>,
    pub alpha: ArchWeights,
}

impl SearchCell {
    /// Wraps prebuilt candidates; the logits are created in `arch` under
    /// `<tag>.alpha`, initialised to zero.
    pub fn from_candidates(block_id: usize, tag: &str, candidates: Vec<Operator>, arch: &Scope) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::DegenerateCell(format!("block `{tag}` has no candidates")));
        }
        let logits = arch.sub(tag).var("alpha", &[candidates.len()], Init::Zeros);
        Ok(SearchCell { block_id, tag: tag.to_string(), candidates, alpha: ArchWeights { logits, trainable: true } })
    }

    /// A cell of plain operators sharing `channels_in -> channels_out`, with
    /// candidate weights under `scope.<op name>`.
    #[allow(clippy::too_many_arguments)]
    pub fn simple(
        block_id: usize,
        tag: &str,
        names: &[&str],
        channels_in: usize,
        channels_out: usize,
        scope: &Scope,
        arch: &Scope,
        activation: Activation,
    ) -> Result<Self> {
        let candidates = names
            .iter()
            .map(|n| Operator::new(OperatorSpec::new(n, channels_in, channels_out)?, &scope.sub(n), activation))
            .collect::<Result<Vec<_>>>()?;
        SearchCell::from_candidates(block_id, tag, candidates, arch)
    }

    pub fn names(&self) -> Vec<String> {
        self.candidates.iter().map(Operator::name).collect()
    }

    pub fn probs(&self) -> Tensor {
        self.alpha.probs()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.candidates.iter().flat_map(Operator::vars).collect()
    }

    pub fn relax_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mix(|op| op.forward(x))
    }

    pub fn relax_forward_guided(&self, x: &Tensor, guide: &Tensor) -> Result<Tensor> {
        self.mix(|op| op.forward_guided(x, guide))
    }

    pub fn relax_forward_deformable(&self, x: &Tensor, cue: &Tensor, guide: &Tensor) -> Result<Tensor> {
        self.mix(|op| op.forward_deformable(x, cue, guide))
    }

    fn mix(&self, f: impl Fn(&Operator) -> Result<Tensor>) -> Result<Tensor> {
        if self.candidates.is_empty() {
            return Err(Error::DegenerateCell(format!("block `{}` has no candidates", self.tag)));
        }
        let probs = self.probs();
        let mut acc: Option<Tensor> = None;
        for (i, op) in self.candidates.iter().enumerate() {
            let term = f(op)?.mul(&probs.index(i));
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term),
            });
        }
        Ok(acc.expect("at least one candidate"))
    }
}

/// A slot of the network: either a search cell or one fixed operator.
#[derive(Debug, Clone)]
pub enum Block {
    Mixed(SearchCell),
    Fixed { tag: String, op: Operator },
}

impl Block {
    pub fn tag(&self) -> &str {
        match self {
            Block::Mixed(c) => &c.tag,
            Block::Fixed { tag, .. } => tag,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Mixed(c) => c.relax_forward(x),
            Block::Fixed { op, .. } => op.forward(x),
        }
    }

    pub fn forward_guided(&self, x: &Tensor, guide: &Tensor) -> Result<Tensor> {
        match self {
            Block::Mixed(c) => c.relax_forward_guided(x, guide),
            Block::Fixed { op, .. } => op.forward_guided(x, guide),
        }
    }

    pub fn forward_deformable(&self, x: &Tensor, cue: &Tensor, guide: &Tensor) -> Result<Tensor> {
        match self {
            Block::Mixed(c) => c.relax_forward_deformable(x, cue, guide),
            Block::Fixed { op, .. } => op.forward_deformable(x, cue, guide),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match self {
            Block::Mixed(c) => c.vars(),
            Block::Fixed { op, .. } => op.vars(),
        }
    }

    pub fn cell(&self) -> Option<&SearchCell> {
        match self {
            Block::Mixed(c) => Some(c),
            Block::Fixed { .. } => None,
        }
    }

    pub fn operators(&self) -> Vec<&Operator> {
        match self {
            Block::Mixed(c) => c.candidates.iter().collect(),
            Block::Fixed { op, .. } => vec![op],
        }
    }
}
