//! Procedural ground-truth scenes and the synthetic exposure model.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ExposurePair, ImageTensor};
use crate::error::{Error, Result};

/// A similarity transform about the image centre. Content moves by
/// `translation` (x, y) pixels, rotates by `rotation` degrees and scales by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub translation: (f64, f64),
    pub rotation: f64,
    pub scale: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        WarpParams { translation: (0.0, 0.0), rotation: 0.0, scale: 1.0 }
    }
}

impl WarpParams {
    pub fn translate(dx: f64, dy: f64) -> Self {
        WarpParams { translation: (dx, dy), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (dx, dy) = self.translation;
        if !(dx.abs() <= 16.0 && dy.abs() <= 16.0) {
            return Err(Error::InvalidParameter(format!("warp translation ({dx}, {dy}) exceeds 16 px")));
        }
        if !(self.rotation.abs() <= 5.0) {
            return Err(Error::InvalidParameter(format!("warp rotation {} exceeds 5 degrees", self.rotation)));
        }
        if !(0.97..=1.03).contains(&self.scale) {
            return Err(Error::InvalidParameter(format!("warp scale {} outside [0.97, 1.03]", self.scale)));
        }
        Ok(())
    }

    /// Resamples every image of the batch bilinearly, clamping at the border.
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let src = img.array();
        let (b, c, h, w) = src.dim();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let theta = self.rotation.to_radians();
        let (sin, cos) = theta.sin_cos();
        let inv_s = 1.0 / self.scale;
        let (tx, ty) = self.translation;
        let mut out = Array4::zeros((b, c, h, w));
        for y in 0..h {
            for x in 0..w {
                // Inverse map: rotate by -theta and unscale.
                let (ux, uy) = (x as f64 - cx - tx, y as f64 - cy - ty);
                let sx = (cos * ux + sin * uy) * inv_s + cx;
                let sy = (-sin * ux + cos * uy) * inv_s + cy;
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (lx, ly) = (sx - x0 as f64, sy - y0 as f64);
                for bi in 0..b {
                    for ci in 0..c {
                        let v = (1.0 - ly) * ((1.0 - lx) * src[[bi, ci, y0, x0]] + lx * src[[bi, ci, y0, x1]])
                            + ly * ((1.0 - lx) * src[[bi, ci, y1, x0]] + lx * src[[bi, ci, y1, x1]]);
                        out[[bi, ci, y, x]] = v;
                    }
                }
            }
        }
        ImageTensor::clamped(out).expect("warping preserves shape")
    }
}

/// Ranges from which misalignment warps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpLimits {
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_scale_delta: f64,
}

impl Default for WarpLimits {
    fn default() -> Self {
        WarpLimits { max_translation: 8.0, max_rotation: 2.0, max_scale_delta: 0.02 }
    }
}

impl WarpLimits {
    pub fn translation_only(max: f64) -> Self {
        WarpLimits { max_translation: max, max_rotation: 0.0, max_scale_delta: 0.0 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> WarpParams {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        WarpParams {
            translation: (sym(rng, self.max_translation), sym(rng, self.max_translation)),
            rotation: sym(rng, self.max_rotation),
            scale: 1.0 + sym(rng, self.max_scale_delta),
        }
    }
}

/// Exposure model parameters. Exposures are in stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub under_exposure: f64,
    pub over_exposure: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub warp: WarpLimits,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { under_exposure: -2.0, over_exposure: 1.5, gamma: 1.0, noise_sigma: 0.01, seed: 0, warp: WarpLimits::default() }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.under_exposure <= 0.0 && self.over_exposure >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need under_exposure <= 0 <= over_exposure, got {} and {}",
                self.under_exposure, self.over_exposure
            )));
        }
        if !(self.gamma > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma {} must be positive and noise_sigma {} non-negative",
                self.gamma, self.noise_sigma
            )));
        }
        let l = self.warp;
        WarpParams {
            translation: (l.max_translation, l.max_translation),
            rotation: l.max_rotation,
            scale: 1.0 + l.max_scale_delta,
        }
        .validate()
    }
}

fn expose(gt: &ImageTensor, stops: f64, gamma: f64, sigma: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
    let gain = stops.exp2();
    let mut arr = gt.array().mapv(|v| (v * gain).clamp(0.0, f64::MAX).powf(gamma));
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        arr.mapv_inplace(|v| v + normal.sample(rng));
    }
    ImageTensor::clamped(arr).expect("exposure preserves shape")
}

/// Synthesizes an exposure pair from a ground-truth image. When `misaligned`,
/// a warp drawn from `cfg.warp` is applied to the over-exposed image. Zero
/// stops are accepted on either side so the identity exposure can be expressed.
pub fn synth_pair(gt: &ImageTensor, cfg: &SynthConfig, misaligned: bool) -> Result<ExposurePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let warp = misaligned.then(|| cfg.warp.sample(&mut rng));
    let under = expose(gt, cfg.under_exposure, cfg.gamma, cfg.noise_sigma, &mut rng);
    let over_src = match &warp {
        Some(wp) => wp.apply(gt),
        None => gt.clone(),
    };
    let over = expose(&over_src, cfg.over_exposure, cfg.gamma, cfg.noise_sigma, &mut rng);
    ExposurePair::new(under, over, gt.clone(), warp)
}

/// A procedural ground-truth scene: a colour gradient overlaid with shapes,
/// stripes and fine texture, kept inside `[0.02, 0.98]`.
pub fn scene(height: usize, width: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e000);
    let (h, w) = (height as f64, width as f64);
    let mut img = Array4::<f64>::zeros((1, 3, height, width));

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (dsin, dcos) = dir.sin_cos();
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + ((x as f64 / w - 0.5) * dcos + (y as f64 / h - 0.5) * dsin);
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[[0, c, y, x]] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let (ry, rx) = (rng.random_range(0.08..0.3) * h, rng.random_range(0.08..0.3) * w);
        let disk = rng.random_bool(0.5);
        let freq = rng.random_range(0.3..1.2);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let striped = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if disk { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if !inside {
                    continue;
                }
                let m = if striped { 0.75 + 0.25 * (freq * (x as f64 + y as f64) + phase).sin() } else { 1.0 };
                for c in 0..3 {
                    img[[0, c, y, x]] = col[c] * m;
                }
            }
        }
    }

    // Smooth luminance texture from a bilinearly interpolated lattice, plus
    // faint per-pixel grain.
    const CELL: usize = 6;
    let (lh, lw) = (height / CELL + 2, width / CELL + 2);
    let lattice_noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let lattice: Vec<f64> = (0..lh * lw).map(|_| lattice_noise.sample(&mut rng)).collect();
    let grain = Normal::new(0.0, 0.005).expect("valid sigma");
    for y in 0..height {
        let (fy, ty) = (y / CELL, (y % CELL) as f64 / CELL as f64);
        for x in 0..width {
            let (fx, tx) = (x / CELL, (x % CELL) as f64 / CELL as f64);
            let at = |yy: usize, xx: usize| lattice[yy * lw + xx];
            let tex = (1.0 - ty) * ((1.0 - tx) * at(fy, fx) + tx * at(fy, fx + 1))
                + ty * ((1.0 - tx) * at(fy + 1, fx) + tx * at(fy + 1, fx + 1));
            for c in 0..3 {
                let v = img[[0, c, y, x]] + tex + grain.sample(&mut rng);
                img[[0, c, y, x]] = v.clamp(0.02, 0.98);
            }
        }
    }
    ImageTensor::new(img)
}
