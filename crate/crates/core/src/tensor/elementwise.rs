use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{Backward, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Sums `v` down to `shape` (the reverse of numpy-style broadcasting).
pub(crate) fn sum_to_array(v: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = v.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

struct BroadcastTo {
    from: Vec<usize>,
}
impl Backward for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_to(&self.from))]
    }
}

struct SumTo {
    from: Vec<usize>,
}
impl Backward for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(&self.from))]
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinKind);
impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
    fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        match self.0 {
            BinKind::Add => vec![Some(g.clone()), Some(g.clone())],
            BinKind::Sub => vec![Some(g.clone()), Some(g.neg())],
            BinKind::Mul => vec![
                a.requires_grad().then(|| g.mul(b)),
                b.requires_grad().then(|| g.mul(a)),
            ],
            BinKind::Div => vec![
                a.requires_grad().then(|| g.div(b)),
                b.requires_grad().then(|| g.mul(out).div(b).neg()),
            ],
        }
    }
}

enum UnKind {
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Sigmoid,
    Sqrt,
    /// Piecewise-linear maps whose derivative is a fixed 0/1/slope mask.
    Masked(ArrayD<f64>),
}

struct Unary(UnKind);
impl Backward for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnKind::Neg => "neg",
            UnKind::Scale(_) => "scale",
            UnKind::AddScalar => "add_scalar",
            UnKind::Exp => "exp",
            UnKind::Ln => "ln",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Sqrt => "sqrt",
            UnKind::Masked(_) => "masked",
        }
    }
    fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let gi = match &self.0 {
            UnKind::Neg => g.neg(),
            UnKind::Scale(c) => g.scale(*c),
            UnKind::AddScalar => g.clone(),
            UnKind::Exp => g.mul(out),
            UnKind::Ln => g.div(&inputs[0]),
            UnKind::Sigmoid => g.mul(&out.mul(&out.neg().add_scalar(1.0))),
            UnKind::Sqrt => {
                // 0.5 / sqrt(x), with subgradient 0 at the origin so norms of
                // zero vectors stay finite.
                let nonzero = out.value().mapv(|s| if s > 0.0 { 1.0 } else { 0.0 });
                let denom = out.add(&Tensor::constant(nonzero.mapv(|m| 1.0 - m)));
                g.div(&denom).scale(0.5).mul(&Tensor::constant(nonzero))
            }
            UnKind::Masked(mask) => g.mul(&Tensor::constant(mask.clone())),
        };
        vec![Some(gi)]
    }
}

struct SumAll {
    shape: Vec<usize>,
}
impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(&self.shape))]
    }
}

struct Reshape {
    from: Vec<usize>,
}
impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(&self.from))]
    }
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}
impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        self.sizes
            .iter()
            .zip(inputs)
            .map(|(&len, inp)| {
                let r = inp.requires_grad().then(|| g.narrow(self.axis, start, len));
                start += len;
                r
            })
            .collect()
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    full: usize,
}
impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.embed(self.axis, self.start, self.full))]
    }
}

struct Embed {
    axis: usize,
    start: usize,
    len: usize,
}
impl Backward for Embed {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.narrow(self.axis, self.start, self.len))]
    }
}

impl Tensor {
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Tensor::from_op(v, vec![self.clone()], BroadcastTo { from: self.shape().to_vec() })
    }

    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = sum_to_array(self.value(), shape);
        let v = v.into_shape_with_order(IxDyn(shape)).expect("sum_to target shape");
        Tensor::from_op(v, vec![self.clone()], SumTo { from: self.shape().to_vec() })
    }

    fn binary(&self, other: &Tensor, kind: BinKind) -> Tensor {
        if self.shape() != other.shape() {
            let shape = broadcast_shape(self.shape(), other.shape());
            return self.broadcast_to(&shape).binary(&other.broadcast_to(&shape), kind);
        }
        let mut out = ArrayD::zeros(IxDyn(self.shape()));
        let z = Zip::from(&mut out).and(self.value()).and(other.value());
        match kind {
            BinKind::Add => z.for_each(|o, &a, &b| *o = a + b),
            BinKind::Sub => z.for_each(|o, &a, &b| *o = a - b),
            BinKind::Mul => z.for_each(|o, &a, &b| *o = a * b),
            BinKind::Div => z.for_each(|o, &a, &b| *o = a / b),
        }
        Tensor::from_op(out, vec![self.clone(), other.clone()], Binary(kind))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinKind::Add)
    }
    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinKind::Sub)
    }
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinKind::Mul)
    }
    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinKind::Div)
    }

    fn unary(&self, v: ArrayD<f64>, kind: UnKind) -> Tensor {
        Tensor::from_op(v, vec![self.clone()], Unary(kind))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(self.value().mapv(|a| -a), UnKind::Neg)
    }
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(self.value().mapv(|a| a * c), UnKind::Scale(c))
    }
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value().mapv(|a| a + c), UnKind::AddScalar)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(self.value().mapv(f64::exp), UnKind::Exp)
    }
    pub fn ln(&self) -> Tensor {
        self.unary(self.value().mapv(f64::ln), UnKind::Ln)
    }
    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(|a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, UnKind::Sigmoid)
    }
    /// Square root with a zero subgradient at the origin.
    pub fn sqrt(&self) -> Tensor {
        self.unary(self.value().mapv(f64::sqrt), UnKind::Sqrt)
    }
    pub fn square(&self) -> Tensor {
        self.mul(self)
    }
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.value().mapv(|a| if a > 0.0 { a } else { a * slope });
        let mask = self.value().mapv(|a| if a > 0.0 { 1.0 } else { slope });
        self.unary(v, UnKind::Masked(mask))
    }
    pub fn abs(&self) -> Tensor {
        let mask = self.value().mapv(|a| {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.unary(self.value().mapv(f64::abs), UnKind::Masked(mask))
    }
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let v = self.value().mapv(|a| a.clamp(lo, hi));
        let mask = self.value().mapv(|a| if a >= lo && a <= hi { 1.0 } else { 0.0 });
        self.unary(v, UnKind::Masked(mask))
    }
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.value().sum();
        Tensor::from_op(ndarray::arr0(s).into_dyn(), vec![self.clone()], SumAll { shape: self.shape().to_vec() })
    }
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums every axis except the first, giving one value per batch item.
    pub fn sum_per_item(&self) -> Tensor {
        let mut target = vec![1; self.ndim()];
        target[0] = self.shape()[0];
        self.sum_to(&target).reshape(&[self.shape()[0]])
    }

    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.mul(other).sum_all()
    }

    /// Softmax of a one-dimensional tensor.
    pub fn softmax(&self) -> Tensor {
        assert_eq!(self.ndim(), 1, "softmax expects a vector");
        let m = self.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = self.add_scalar(-m).exp();
        e.div(&e.sum_all())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        Tensor::from_op(v, vec![self.clone()], Reshape { from: self.shape().to_vec() })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let full = self.shape()[axis];
        assert!(start + len <= full, "narrow {start}+{len} exceeds axis size {full}");
        if start == 0 && len == full {
            return self.clone();
        }
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(v, vec![self.clone()], Narrow { axis, start, full })
    }

    /// Places `self` at `start` along `axis` inside a zero tensor of extent `full`.
    pub(crate) fn embed(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Tensor::from_op(v, vec![self.clone()], Embed { axis, start, len })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let views: Vec<_> = parts.iter().map(|t| t.value().view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes = parts.iter().map(|t| t.shape()[axis]).collect();
        Tensor::from_op(v, parts.iter().map(|t| (*t).clone()).collect(), Concat { axis, sizes })
    }

    /// Selects element `i` of a vector as a scalar tensor.
    pub fn index(&self, i: usize) -> Tensor {
        assert_eq!(self.ndim(), 1);
        self.narrow(0, i, 1).reshape(&[])
    }
}
