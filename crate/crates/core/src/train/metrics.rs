//! Reference-based quality metrics.

use ndarray::{s, Array2};

use crate::data::ImageTensor;
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(y: &ImageTensor, gt: &ImageTensor) -> Result<()> {
    if y.shape() != gt.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", y.shape(), gt.shape())));
    }
    Ok(())
}

pub fn mse(y: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check(y, gt)?;
    let n = y.array().len() as f64;
    Ok(y.array().iter().zip(gt.array()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10·log10(1 / MSE)` over every element, capped at [`PSNR_CAP`] when the
/// error vanishes.
pub fn psnr(y: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    let m = mse(y, gt)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gray(img: &ImageTensor, item: usize) -> Array2<f64> {
    let a = img.array();
    let (r, g, b) = (a.slice(s![item, 0, .., ..]), a.slice(s![item, 1, .., ..]), a.slice(s![item, 2, .., ..]));
    let mut out = Array2::zeros((img.height(), img.width()));
    ndarray::Zip::from(&mut out).and(&r).and(&g).and(&b).for_each(|o, &r, &g, &b| *o = 0.299 * r + 0.587 * g + 0.114 * b);
    out
}

fn gaussian() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian.
fn filter(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let mut rows = Array2::<f64>::zeros((h, w - n + 1));
    for i in 0..h {
        for j in 0..w - n + 1 {
            rows[[i, j]] = (0..n).map(|t| k[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h - n + 1, w - n + 1));
    for i in 0..h - n + 1 {
        for j in 0..w - n + 1 {
            out[[i, j]] = (0..n).map(|t| k[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

fn ssim_gray(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let k = gaussian();
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    let mx = filter(x, &k);
    let my = filter(y, &k);
    let sxx = filter(&(x * x), &k) - &mx * &mx;
    let syy = filter(&(y * y), &k) - &my * &my;
    let sxy = filter(&(x * y), &k) - &mx * &my;
    let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    (num / den).mean().unwrap_or(1.0)
}

/// Mean local structural similarity on luma, averaged over the batch.
pub fn ssim(y: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check(y, gt)?;
    if y.height() < SSIM_WINDOW || y.width() < SSIM_WINDOW {
        return Err(Error::SsimWindow { height: y.height(), width: y.width(), window: SSIM_WINDOW });
    }
    let b = y.batch();
    Ok((0..b).map(|i| ssim_gray(&gray(y, i), &gray(gt, i))).sum::<f64>() / b as f64)
}
