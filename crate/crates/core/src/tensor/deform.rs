//! Deformable convolution (single offset group, no modulation mask).
//!
//! For output position `p` and kernel tap `j` the input is sampled at
//! `p·stride − pad + j·dilation + offset_j(p)` with bilinear interpolation;
//! samples falling outside the image read as zero. Offsets are laid out as
//! `[N, 2·kh·kw, Ho, Wo]` with `(dy, dx)` interleaved per tap.

use ndarray::{ArrayD, IxDyn};

use super::conv::{gemm, with_scratch, ConvParams};
use super::{Backward, Tensor};

struct Layout {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    p: ConvParams,
}

impl Layout {
    fn new(x: &[usize], offsets: &[usize], weight: &[usize], p: ConvParams) -> Self {
        assert_eq!(x.len(), 4, "deformable input must be 4-D");
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, ci, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        assert_eq!(c, ci, "deformable input has {c} channels, weight expects {ci}");
        let ho = p.output_size(h, kh);
        let wo = p.output_size(w, kw);
        assert_eq!(
            offsets,
            &[n, 2 * kh * kw, ho, wo],
            "offset field shape does not match kernel {kh}x{kw} and output {ho}x{wo}"
        );
        Layout { n, c, h, w, o, kh, kw, ho, wo, p }
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn n_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Sampling position of tap `j` at output index `q` for batch item `b`.
    fn position(&self, off: &[f64], b: usize, j: usize, q: usize) -> (f64, f64) {
        let (oy, ox) = (q / self.wo, q % self.wo);
        let (ki, kj) = (j / self.kw, j % self.kw);
        let s = self.p.stride as f64;
        let pad = self.p.padding as f64;
        let d = self.p.dilation as f64;
        let base = b * 2 * self.taps() * self.n_out();
        let dy = off[base + (2 * j) * self.n_out() + q];
        let dx = off[base + (2 * j + 1) * self.n_out() + q];
        (
            oy as f64 * s - pad + ki as f64 * d + dy,
            ox as f64 * s - pad + kj as f64 * d + dx,
        )
    }
}

/// Bilinear corners: `(flat index or None when outside, weight, d/dy, d/dx)`.
fn corners(py: f64, px: f64, h: usize, w: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let idx = |y: isize, x: isize| {
        (y >= 0 && y < h as isize && x >= 0 && x < w as isize).then(|| y as usize * w + x as usize)
    };
    [
        (idx(y0, x0), (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
        (idx(y0, x0 + 1), (1.0 - ly) * lx, -lx, 1.0 - ly),
        (idx(y0 + 1, x0), ly * (1.0 - lx), 1.0 - lx, -ly),
        (idx(y0 + 1, x0 + 1), ly * lx, lx, ly),
    ]
}

fn sample_columns(l: &Layout, x: &[f64], off: &[f64], b: usize, cols: &mut [f64]) {
    let plane = l.h * l.w;
    let n_out = l.n_out();
    let k = l.taps();
    let xb = &x[b * l.c * plane..(b + 1) * l.c * plane];
    for j in 0..k {
        for q in 0..n_out {
            let (py, px) = l.position(off, b, j, q);
            let cs = corners(py, px, l.h, l.w);
            for c in 0..l.c {
                let xc = &xb[c * plane..(c + 1) * plane];
                let mut v = 0.0;
                for &(i, wt, _, _) in &cs {
                    if let Some(i) = i {
                        v += wt * xc[i];
                    }
                }
                cols[(c * k + j) * n_out + q] = v;
            }
        }
    }
}

fn forward(x: &ArrayD<f64>, off: &ArrayD<f64>, weight: &ArrayD<f64>, p: ConvParams) -> ArrayD<f64> {
    let l = Layout::new(x.shape(), off.shape(), weight.shape(), p);
    let (xs, os, ws) = (x.as_slice().unwrap(), off.as_slice().unwrap(), weight.as_slice().unwrap());
    let rows = l.c * l.taps();
    let mut out = vec![0.0; l.n * l.o * l.n_out()];
    with_scratch(rows * l.n_out(), |cols| {
        for b in 0..l.n {
            sample_columns(&l, xs, os, b, cols);
            let ob = &mut out[b * l.o * l.n_out()..(b + 1) * l.o * l.n_out()];
            gemm(ws, (l.o, rows), false, cols, (rows, l.n_out()), false, ob, false);
        }
    });
    ArrayD::from_shape_vec(IxDyn(&[l.n, l.o, l.ho, l.wo]), out).unwrap()
}

struct DeformConv2d {
    p: ConvParams,
}

impl Backward for DeformConv2d {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn higher_order(&self) -> bool {
        false
    }

    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, off, weight) = (&inputs[0], &inputs[1], &inputs[2]);
        let l = Layout::new(x.shape(), off.shape(), weight.shape(), self.p);
        let (xs, os, ws, gs) = (x.data(), off.data(), weight.data(), g.data());
        let k = l.taps();
        let rows = l.c * k;
        let n_out = l.n_out();
        let plane = l.h * l.w;

        let mut dx = vec![0.0; xs.len()];
        let mut doff = vec![0.0; os.len()];
        let mut dw = vec![0.0; ws.len()];
        with_scratch(rows * n_out, |cols| {
            with_scratch(rows * n_out, |gcols| {
                for b in 0..l.n {
                    let gb = &gs[b * l.o * n_out..(b + 1) * l.o * n_out];
                    if weight.requires_grad() {
                        sample_columns(&l, xs, os, b, cols);
                        gemm(gb, (l.o, n_out), false, cols, (rows, n_out), true, &mut dw, b > 0);
                    }
                    if !(x.requires_grad() || off.requires_grad()) {
                        continue;
                    }
                    gemm(ws, (l.o, rows), true, gb, (l.o, n_out), false, gcols, false);
                    let xb = &xs[b * l.c * plane..(b + 1) * l.c * plane];
                    let dxb = &mut dx[b * l.c * plane..(b + 1) * l.c * plane];
                    let obase = b * 2 * k * n_out;
                    for j in 0..k {
                        for q in 0..n_out {
                            let (py, px) = l.position(os, b, j, q);
                            let cs = corners(py, px, l.h, l.w);
                            let (mut gy, mut gx) = (0.0, 0.0);
                            for c in 0..l.c {
                                let gv = gcols[(c * k + j) * n_out + q];
                                if gv == 0.0 {
                                    continue;
                                }
                                for &(i, wt, dwy, dwx) in &cs {
                                    if let Some(i) = i {
                                        dxb[c * plane + i] += wt * gv;
                                        let xv = xb[c * plane + i];
                                        gy += dwy * xv * gv;
                                        gx += dwx * xv * gv;
                                    }
                                }
                            }
                            doff[obase + (2 * j) * n_out + q] += gy;
                            doff[obase + (2 * j + 1) * n_out + q] += gx;
                        }
                    }
                }
            })
        });
        let mk = |v: Vec<f64>, s: &[usize]| Tensor::constant(ArrayD::from_shape_vec(IxDyn(s), v).unwrap());
        vec![
            x.requires_grad().then(|| mk(dx, x.shape())),
            off.requires_grad().then(|| mk(doff, off.shape())),
            weight.requires_grad().then(|| mk(dw, weight.shape())),
        ]
    }
}

impl Tensor {
    /// Deformable convolution of `self` with `weight`, sampling at positions
    /// displaced by `offsets`.
    pub fn deform_conv2d(&self, offsets: &Tensor, weight: &Tensor, p: ConvParams) -> Tensor {
        let v = forward(self.value(), offsets.value(), weight.value(), p);
        Tensor::from_op(v, vec![self.clone(), offsets.clone(), weight.clone()], DeformConv2d { p })
    }
}
