use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Central-difference gradient of `f` at `x`.
fn numeric_grad(x: &ArrayD<f64>, f: &dyn Fn(&Tensor) -> f64, h: f64) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[i] += h;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[i] -= h;
        g.as_slice_mut().unwrap()[i] = (f(&Tensor::constant(xp)) - f(&Tensor::constant(xm))) / (2.0 * h);
    }
    g
}

fn assert_grad_matches(x: ArrayD<f64>, f: impl Fn(&Tensor) -> Tensor, tol: f64) {
    let leaf = Tensor::leaf(x.clone(), true);
    let y = f(&leaf);
    let analytic = grad(&y, &[&leaf], false).unwrap().remove(0);
    let numeric = numeric_grad(&x, &|t| no_grad(|| f(t).item()), 1e-6);
    let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    for (a, n) in analytic.data().iter().zip(numeric.iter()) {
        assert!((a - n).abs() / scale < tol, "analytic {a} vs numeric {n} (scale {scale})");
    }
}

/// Direct nested-loop cross-correlation used as an oracle for im2col/gemm.
fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, p: ConvParams) -> ArrayD<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = p.output_size(h, kh);
    let wo = p.output_size(wd, kw);
    let mut out = ArrayD::zeros(IxDyn(&[n, o, ho, wo]));
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x[[b, ic, iy as usize, ix as usize]] * w[[oc, ic, ki, kj]];
                                }
                            }
                        }
                    }
                    out[[b, oc, oy, ox]] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        (ConvParams::same(3, 1), 3),
        (ConvParams::same(5, 2), 5),
        (ConvParams { stride: 2, padding: 1, dilation: 1 }, 4),
        (ConvParams { stride: 2, padding: 1, dilation: 1 }, 3),
        (ConvParams::default(), 1),
    ];
    for (p, k) in cases {
        let x = rand_array(&mut rng, &[2, 3, 9, 8], 1.0);
        let w = rand_array(&mut rng, &[4, 3, k, k], 1.0);
        let fast = Tensor::constant(x.clone()).conv2d(&Tensor::constant(w.clone()), p);
        let slow = naive_conv(&x, &w, p);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_array(&mut rng, &[2, 3], 1.0);
    let other = Tensor::constant(rand_array(&mut rng, &[2, 3], 1.0).mapv(|v| v + 2.0));
    assert_grad_matches(x.clone(), |t| t.mul(&other).sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.div(&other).sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| other.div(&t.add_scalar(3.0)).sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.sigmoid().square().sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.exp().mean_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.leaky_relu(0.2).square().sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.add_scalar(2.0).sqrt().sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.add_scalar(2.0).ln().sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.reshape(&[3, 2]).narrow(0, 1, 2).square().sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| Tensor::concat(&[t, &t.scale(2.0)], 1).square().sum_all(), 1e-6);
    assert_grad_matches(x, |t| t.sum_per_item().square().sum_all(), 1e-6);
}

#[test]
fn broadcasting_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let big = Tensor::constant(rand_array(&mut rng, &[2, 3, 4, 4], 1.0));
    assert_grad_matches(rand_array(&mut rng, &[3], 1.0), |b| big.add_channel_bias(b).square().sum_all(), 1e-6);
    assert_grad_matches(rand_array(&mut rng, &[], 1.0), |s| big.mul(s).square().sum_all(), 1e-6);
    assert_grad_matches(rand_array(&mut rng, &[2, 1, 1, 1], 1.0), |s| big.mul(s).swish().sum_all(), 1e-6);
}

impl Tensor {
    // x * sigmoid(x), a smooth non-polynomial test function.
    fn swish(&self) -> Tensor {
        self.sigmoid().mul(self)
    }
}

#[test]
fn softmax_gradient_and_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_array(&mut rng, &[5], 2.0);
    let target = Tensor::constant(rand_array(&mut rng, &[5], 1.0));
    assert_grad_matches(x.clone(), |t| t.softmax().dot(&target), 1e-6);
    let s: f64 = Tensor::constant(x).softmax().data().iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[2, 2, 6, 6], 1.0);
    let w = rand_array(&mut rng, &[3, 2, 4, 4], 0.5);
    let p = ConvParams { stride: 2, padding: 1, dilation: 1 };
    let wt = Tensor::constant(w.clone());
    let xt = Tensor::constant(x.clone());
    assert_grad_matches(x.clone(), |t| t.conv2d(&wt, p).square().sum_all(), 1e-6);
    assert_grad_matches(w.clone(), |t| xt.conv2d(t, p).square().sum_all(), 1e-6);
    let pd = ConvParams::same(3, 2);
    let w3 = Tensor::constant(rand_array(&mut rng, &[2, 2, 3, 3], 0.5));
    assert_grad_matches(x, |t| t.conv2d(&w3, pd).sigmoid().sum_all(), 1e-6);
}

#[test]
fn conv_adjoint_identity() {
    // <conv(x, w), g> = <x, conv_input_grad(g, w)> = <w, conv_weight_grad(x, g)>
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = ConvParams { stride: 2, padding: 1, dilation: 1 };
    let x = Tensor::constant(rand_array(&mut rng, &[2, 3, 7, 7], 1.0));
    let w = Tensor::constant(rand_array(&mut rng, &[4, 3, 3, 3], 1.0));
    let y = x.conv2d(&w, p);
    let g = Tensor::constant(rand_array(&mut rng, y.shape(), 1.0));
    let lhs = y.dot(&g).item();
    let mid = x.dot(&g.conv2d_input_grad(&w, x.shape(), p)).item();
    let rhs = w.dot(&x.conv2d_weight_grad(&g, w.shape(), p)).item();
    assert!((lhs - mid).abs() < 1e-10 && (lhs - rhs).abs() < 1e-10);
}

#[test]
fn second_order_through_conv_matches_finite_differences() {
    // penalty(w) = (|d/dx sum(lrelu(conv(x, w)) * v)| - 1)^2, differentiated w.r.t. w.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::constant(rand_array(&mut rng, &[2, 2, 6, 6], 1.0));
    let v = Tensor::constant(rand_array(&mut rng, &[2, 3, 3, 3], 1.0));
    let b = Tensor::constant(rand_array(&mut rng, &[3], 0.3));
    let p = ConvParams { stride: 2, padding: 1, dilation: 1 };
    let w0 = rand_array(&mut rng, &[3, 2, 4, 4], 0.5);

    let penalty = |w: &Tensor, create_graph: bool| -> Tensor {
        let xl = Tensor::leaf(x.value().clone(), true);
        let out = xl.conv2d(w, p).add_channel_bias(&b).leaky_relu(0.2).mul(&v).sum_all();
        let gx = grad(&out, &[&xl], create_graph).unwrap().remove(0);
        gx.square().sum_per_item().sqrt().add_scalar(-1.0).square().mean_all()
    };
    let wl = Tensor::leaf(w0.clone(), true);
    let pen = penalty(&wl, true);
    let analytic = grad(&pen, &[&wl], false).unwrap().remove(0);
    let numeric = numeric_grad(&w0, &|t| penalty(t, false).item(), 1e-6);
    let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    for (a, n) in analytic.data().iter().zip(numeric.iter()) {
        assert!((a - n).abs() / scale < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn first_order_ops_refuse_second_order_graphs() {
    let x = Tensor::leaf(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5), true);
    let y = x.max_pool2d_same(3).sum_all();
    assert!(matches!(grad(&y, &[&x], true), Err(crate::Error::Unsupported(_))));
    assert!(grad(&y, &[&x], false).is_ok());
}

#[test]
fn pooling_upsample_pad_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_array(&mut rng, &[1, 2, 5, 6], 1.0);
    let wsum = Tensor::constant(rand_array(&mut rng, &[1, 2, 5, 6], 1.0));
    assert_grad_matches(x.clone(), |t| t.avg_pool2d_same(3).mul(&wsum).sum_all(), 1e-6);
    assert_grad_matches(x.clone(), |t| t.max_pool2d_same(3).mul(&wsum).sum_all(), 1e-6);
    let wu = Tensor::constant(rand_array(&mut rng, &[1, 2, 10, 12], 1.0));
    assert_grad_matches(x.clone(), |t| t.upsample2x().mul(&wu).sum_all(), 1e-6);
    let wp = Tensor::constant(rand_array(&mut rng, &[1, 2, 7, 8], 1.0));
    assert_grad_matches(x, |t| t.reflect_pad(1).mul(&wp).sum_all(), 1e-6);
}

#[test]
fn deformable_zero_offsets_equal_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::constant(rand_array(&mut rng, &[2, 3, 8, 8], 1.0));
    let w = Tensor::constant(rand_array(&mut rng, &[4, 3, 3, 3], 1.0));
    let p = ConvParams::same(3, 1);
    let off = Tensor::zeros(&[2, 18, 8, 8]);
    let a = x.deform_conv2d(&off, &w, p);
    let b = x.conv2d(&w, p);
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn deformable_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = ConvParams::same(3, 1);
    let x = rand_array(&mut rng, &[1, 2, 6, 6], 1.0);
    // Keep sampling positions away from integer kinks of the bilinear kernel.
    let off = rand_array(&mut rng, &[1, 18, 6, 6], 0.4).mapv(|v| v + 0.5);
    let w = rand_array(&mut rng, &[3, 2, 3, 3], 1.0);
    let (xt, ot, wt) = (Tensor::constant(x.clone()), Tensor::constant(off.clone()), Tensor::constant(w.clone()));
    assert_grad_matches(x, |t| t.deform_conv2d(&ot, &wt, p).square().sum_all(), 1e-5);
    assert_grad_matches(off, |t| xt.deform_conv2d(t, &wt, p).square().sum_all(), 1e-5);
    assert_grad_matches(w, |t| xt.deform_conv2d(&ot, t, p).square().sum_all(), 1e-5);
}

#[test]
fn grad_mode_controls_recording() {
    let x = Tensor::leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
    let y = no_grad(|| x.scale(2.0));
    assert!(!y.requires_grad());
    assert!(x.scale(2.0).requires_grad());
    assert!(is_grad_enabled());
}

#[test]
fn repeated_input_accumulates() {
    let x = Tensor::leaf(ndarray::arr1(&[3.0]).into_dyn(), true);
    let y = x.mul(&x).add(&x).sum_all();
    let g = grad(&y, &[&x], false).unwrap().remove(0);
    assert_eq!(g.data(), &[7.0]);
}
