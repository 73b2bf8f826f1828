//! Stride-1 pooling, bilinear 2x upsampling and reflect padding. These are
//! first-order only.

use ndarray::{ArrayD, IxDyn};

use super::{Backward, Tensor};

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected an NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

struct MaxPool {
    argmax: Vec<usize>,
}
impl Backward for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        for (&src, &gv) in self.argmax.iter().zip(g.data()) {
            dx[src] += gv;
        }
        vec![Some(Tensor::constant(ArrayD::from_shape_vec(IxDyn(inputs[0].shape()), dx).unwrap()))]
    }
}

struct AvgPool {
    k: usize,
}
impl Backward for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = nchw(inputs[0].shape());
        let r = (self.k / 2) as isize;
        let gs = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h as isize {
                let (y0, y1) = ((y - r).max(0), (y + r).min(h as isize - 1));
                for x in 0..w as isize {
                    let (x0, x1) = ((x - r).max(0), (x + r).min(w as isize - 1));
                    let cnt = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                    let gv = gs[base + y as usize * w + x as usize] / cnt;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            dx[base + yy as usize * w + xx as usize] += gv;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::constant(ArrayD::from_shape_vec(IxDyn(inputs[0].shape()), dx).unwrap()))]
    }
}

/// Source taps for bilinear 2x upsampling (half-pixel centres, edge clamped).
fn upsample_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct Upsample2x;
impl Backward for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_bilinear2x"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = nchw(inputs[0].shape());
        let (ty, tx) = (upsample_taps(2 * h, h), upsample_taps(2 * w, w));
        let gs = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let src = &gs[p * 4 * h * w..(p + 1) * 4 * h * w];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let gv = src[oy * 2 * w + ox];
                    dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                    dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                    dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                    dst[y1 * w + x1] += gv * ly * lx;
                }
            }
        }
        vec![Some(Tensor::constant(ArrayD::from_shape_vec(IxDyn(inputs[0].shape()), dx).unwrap()))]
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

struct ReflectPad {
    pad: usize,
}
impl Backward for ReflectPad {
    fn name(&self) -> &'static str {
        "reflect_pad"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = nchw(inputs[0].shape());
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let gs = g.data();
        let p = self.pad as isize;
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for y in 0..hp {
                let sy = reflect(y as isize - p, h);
                for x in 0..wp {
                    let sx = reflect(x as isize - p, w);
                    dx[plane * h * w + sy * w + sx] += gs[plane * hp * wp + y * wp + x];
                }
            }
        }
        vec![Some(Tensor::constant(ArrayD::from_shape_vec(IxDyn(inputs[0].shape()), dx).unwrap()))]
    }
}

impl Tensor {
    /// Max pooling with an odd window, stride 1 and size-preserving padding.
    pub fn max_pool2d_same(&self, k: usize) -> Tensor {
        assert!(k % 2 == 1, "pooling window must be odd");
        let (n, c, h, w) = nchw(self.shape());
        let r = (k / 2) as isize;
        let xs = self.data();
        let mut out = vec![0.0; xs.len()];
        let mut argmax = vec![0; xs.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                        for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                            let i = base + yy as usize * w + xx as usize;
                            if xs[i] > best {
                                best = xs[i];
                                arg = i;
                            }
                        }
                    }
                    let o = base + y as usize * w + x as usize;
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(self.shape()), out).unwrap();
        Tensor::from_op(v, vec![self.clone()], MaxPool { argmax })
    }

    /// Average pooling with an odd window, stride 1; padded taps are excluded
    /// from the count so constants are preserved at the border.
    pub fn avg_pool2d_same(&self, k: usize) -> Tensor {
        assert!(k % 2 == 1, "pooling window must be odd");
        let (n, c, h, w) = nchw(self.shape());
        let r = (k / 2) as isize;
        let xs = self.data();
        let mut out = vec![0.0; xs.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h as isize {
                let (y0, y1) = ((y - r).max(0), (y + r).min(h as isize - 1));
                for x in 0..w as isize {
                    let (x0, x1) = ((x - r).max(0), (x + r).min(w as isize - 1));
                    let mut s = 0.0;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            s += xs[base + yy as usize * w + xx as usize];
                        }
                    }
                    let cnt = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                    out[base + y as usize * w + x as usize] = s / cnt;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(self.shape()), out).unwrap();
        Tensor::from_op(v, vec![self.clone()], AvgPool { k })
    }

    /// Bilinear upsampling by a factor of two.
    pub fn upsample2x(&self) -> Tensor {
        let (n, c, h, w) = nchw(self.shape());
        let (ty, tx) = (upsample_taps(2 * h, h), upsample_taps(2 * w, w));
        let xs = self.data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    dst[oy * 2 * w + ox] = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * ((1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap();
        Tensor::from_op(v, vec![self.clone()], Upsample2x)
    }

    /// Mirror padding (edge pixel not repeated) on both spatial axes.
    pub fn reflect_pad(&self, pad: usize) -> Tensor {
        let (n, c, h, w) = nchw(self.shape());
        assert!(pad < h && pad < w, "reflect padding {pad} too large for {h}x{w}");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let xs = self.data();
        let p = pad as isize;
        let mut out = vec![0.0; n * c * hp * wp];
        for plane in 0..n * c {
            for y in 0..hp {
                let sy = reflect(y as isize - p, h);
                for x in 0..wp {
                    let sx = reflect(x as isize - p, w);
                    out[plane * hp * wp + y * wp + x] = xs[plane * h * w + sy * w + sx];
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, hp, wp]), out).unwrap();
        Tensor::from_op(v, vec![self.clone()], ReflectPad { pad })
    }
}
