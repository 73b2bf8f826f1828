//! 2-D cross-correlation (NCHW) and its two adjoints.
//!
//! `conv2d`, `conv2d_input_grad` and `conv2d_weight_grad` are bilinear and
//! each one's derivatives are expressed with the other two, so convolution
//! graphs support arbitrary-order differentiation.

use std::cell::RefCell;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{Backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvParams {
    /// Stride 1 with the padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel, got {kernel}");
        ConvParams { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.padding >= span,
            "kernel span {span} exceeds padded input {}",
            input + 2 * self.padding
        );
        (input + 2 * self.padding - span) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: ConvParams,
}

impl Geometry {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, p: ConvParams) -> Self {
        let ho = p.output_size(h, kh);
        let wo = p.output_size(w, kw);
        Geometry { c, h, w, kh, kw, ho, wo, p }
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[c, h, w]` into `[c*kh*kw, ho*wo]`.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (s, pad, d) = (self.p.stride as isize, self.p.padding as isize, self.p.dilation as isize);
        let n_out = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - pad + ki as isize * d;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - pad + kj as isize * d;
                            *v = if ix >= 0 && ix < self.w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters columns back, accumulating into `x`.
    pub fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (s, pad, d) = (self.p.stride as isize, self.p.padding as isize, self.p.dilation as isize);
        let n_out = self.cols();
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - pad + ki as isize * d;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = ox as isize * s - pad + kj as isize * d;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional transposes.
pub(crate) fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    ta: bool,
    b: &[f64],
    b_shape: (usize, usize),
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("gemm lhs");
    let bv = ArrayView2::from_shape(b_shape, b).expect("gemm rhs");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("gemm out");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

thread_local! {
    static SCRATCH: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused buffer of `len` values. The contents are stale, so
/// callers must overwrite every element before reading it. Reuse keeps large
/// column buffers from being mapped and faulted in again on every call.
pub(crate) fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    buf.resize(len, 0.0);
    let r = f(&mut buf);
    SCRATCH.with(|s| s.borrow_mut().push(buf));
    r
}

fn dims4(shape: &[usize], what: &str) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "{what} must be 4-D, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn conv_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, p: ConvParams) -> ArrayD<f64> {
    let [n, c, h, wd] = dims4(x.shape(), "conv input");
    let [co, ci, kh, kw] = dims4(w.shape(), "conv weight");
    assert_eq!(c, ci, "conv input has {c} channels, weight expects {ci}");
    let g = Geometry::new(c, h, wd, kh, kw, p);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut out = vec![0.0; n * co * g.cols()];
    with_scratch(if p.is_pointwise(kh, kw) { 0 } else { g.rows() * g.cols() }, |cols| {
        for b in 0..n {
            let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
            let ob = &mut out[b * co * g.cols()..(b + 1) * co * g.cols()];
            let src: &[f64] = if p.is_pointwise(kh, kw) {
                xb
            } else {
                g.im2col(xb, cols);
                cols
            };
            gemm(ws, (co, g.rows()), false, src, (g.rows(), g.cols()), false, ob, false);
        }
    });
    ArrayD::from_shape_vec(IxDyn(&[n, co, g.ho, g.wo]), out).unwrap()
}

fn conv_input_grad_raw(gy: &ArrayD<f64>, w: &ArrayD<f64>, x_shape: &[usize], p: ConvParams) -> ArrayD<f64> {
    let [n, c, h, wd] = dims4(x_shape, "conv input");
    let [co, _, kh, kw] = dims4(w.shape(), "conv weight");
    let g = Geometry::new(c, h, wd, kh, kw, p);
    assert_eq!(gy.shape(), &[n, co, g.ho, g.wo], "conv output gradient shape");
    let gs = gy.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let mut dx = vec![0.0; n * c * h * wd];
    with_scratch(if p.is_pointwise(kh, kw) { 0 } else { g.rows() * g.cols() }, |cols| {
        for b in 0..n {
            let gb = &gs[b * co * g.cols()..(b + 1) * co * g.cols()];
            let db = &mut dx[b * c * h * wd..(b + 1) * c * h * wd];
            if p.is_pointwise(kh, kw) {
                gemm(ws, (co, g.rows()), true, gb, (co, g.cols()), false, db, false);
            } else {
                gemm(ws, (co, g.rows()), true, gb, (co, g.cols()), false, cols, false);
                g.col2im(cols, db);
            }
        }
    });
    ArrayD::from_shape_vec(IxDyn(x_shape), dx).unwrap()
}

fn conv_weight_grad_raw(x: &ArrayD<f64>, gy: &ArrayD<f64>, w_shape: &[usize], p: ConvParams) -> ArrayD<f64> {
    let [n, c, h, wd] = dims4(x.shape(), "conv input");
    let [co, _, kh, kw] = dims4(w_shape, "conv weight");
    let g = Geometry::new(c, h, wd, kh, kw, p);
    assert_eq!(gy.shape(), &[n, co, g.ho, g.wo], "conv output gradient shape");
    let xs = x.as_slice().unwrap();
    let gs = gy.as_slice().unwrap();
    let mut dw = vec![0.0; co * g.rows()];
    with_scratch(if p.is_pointwise(kh, kw) { 0 } else { g.rows() * g.cols() }, |cols| {
        for b in 0..n {
            let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
            let gb = &gs[b * co * g.cols()..(b + 1) * co * g.cols()];
            let src: &[f64] = if p.is_pointwise(kh, kw) {
                xb
            } else {
                g.im2col(xb, cols);
                cols
            };
            gemm(gb, (co, g.cols()), false, src, (g.rows(), g.cols()), true, &mut dw, b > 0);
        }
    });
    ArrayD::from_shape_vec(IxDyn(w_shape), dw).unwrap()
}

struct Conv2d {
    p: ConvParams,
}
impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        vec![
            x.requires_grad().then(|| g.conv2d_input_grad(w, x.shape(), self.p)),
            w.requires_grad().then(|| x.conv2d_weight_grad(g, w.shape(), self.p)),
        ]
    }
}

struct ConvInputGrad {
    p: ConvParams,
}
impl Backward for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, up: &Tensor) -> Vec<Option<Tensor>> {
        let (gy, w) = (&inputs[0], &inputs[1]);
        vec![
            gy.requires_grad().then(|| up.conv2d(w, self.p)),
            w.requires_grad().then(|| up.conv2d_weight_grad(gy, w.shape(), self.p)),
        ]
    }
}

struct ConvWeightGrad {
    p: ConvParams,
}
impl Backward for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, up: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        vec![
            x.requires_grad().then(|| gy.conv2d_input_grad(up, x.shape(), self.p)),
            gy.requires_grad().then(|| x.conv2d(up, self.p)),
        ]
    }
}

impl Tensor {
    /// Cross-correlation of `self` `[N, C, H, W]` with `weight` `[O, C, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor, p: ConvParams) -> Tensor {
        let v = conv_forward(self.value(), weight.value(), p);
        Tensor::from_op(v, vec![self.clone(), weight.clone()], Conv2d { p })
    }

    /// Gradient of a convolution with respect to its input (transposed convolution).
    pub fn conv2d_input_grad(&self, weight: &Tensor, input_shape: &[usize], p: ConvParams) -> Tensor {
        let v = conv_input_grad_raw(self.value(), weight.value(), input_shape, p);
        Tensor::from_op(v, vec![self.clone(), weight.clone()], ConvInputGrad { p })
    }

    /// Gradient of a convolution with respect to its weight; `self` is the input.
    pub fn conv2d_weight_grad(&self, grad_out: &Tensor, weight_shape: &[usize], p: ConvParams) -> Tensor {
        let v = conv_weight_grad_raw(self.value(), grad_out.value(), weight_shape, p);
        Tensor::from_op(v, vec![self.clone(), grad_out.clone()], ConvWeightGrad { p })
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Tensor {
        let c = bias.numel();
        self.add(&bias.reshape(&[1, c, 1, 1]))
    }
}
