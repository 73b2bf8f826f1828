//! Exposure pairs: image containers, synthesis, augmentation and datasets.

mod augment;
mod dataset;
mod io;
mod synth;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use dataset::{Dataset, ManifestEntry, MANIFEST_FILE};
pub use io::{load_image, save_png};
pub use synth::{scene, synth_pair, SynthConfig, WarpLimits, WarpParams};

use ndarray::{s, Array4, Axis};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A batch of RGB images, `[B, 3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array4<f64>);

impl ImageTensor {
    /// Validates shape, range and finiteness.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image tensor needs 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not a nonzero multiple of 4")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidParameter(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor(data))
    }

    /// Clamps into `[0, 1]` (non-finite values become 0) before validating.
    pub fn clamped(mut data: Array4<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        ImageTensor::new(data)
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        ImageTensor::new(Array4::from_elem((batch, 3, height, width), value))
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let arr = t
            .value()
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("expected a 4-D tensor, got {:?}", t.shape())))?;
        ImageTensor::new(arr)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(self.0.clone().into_dyn())
    }

    pub fn array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f64> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().2
    }

    pub fn width(&self) -> usize {
        self.0.dim().3
    }

    pub fn shape(&self) -> [usize; 4] {
        let (b, c, h, w) = self.0.dim();
        [b, c, h, w]
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    /// The `i`-th image as a batch of one.
    pub fn item(&self, i: usize) -> ImageTensor {
        ImageTensor(self.0.slice(s![i..i + 1, .., .., ..]).to_owned())
    }

    /// Concatenates batches; all inputs must share their spatial size.
    pub fn stack(images: &[&ImageTensor]) -> Result<ImageTensor> {
        let views: Vec<_> = images.iter().map(|im| im.0.view()).collect();
        let arr = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot stack images: {e}")))?;
        Ok(ImageTensor(arr))
    }

    /// Pointwise average, the naive fusion baseline.
    pub fn average(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
        if a.shape() != b.shape() {
            return Err(Error::PairShape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(ImageTensor((&a.0 + &b.0) * 0.5))
    }
}

/// An under/over exposure pair with its ground truth. `warp`, when present,
/// is the misalignment applied to `over` at synthesis time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposurePair {
    pub under: ImageTensor,
    pub over: ImageTensor,
    pub gt: ImageTensor,
    pub warp: Option<WarpParams>,
}

impl ExposurePair {
    pub fn new(under: ImageTensor, over: ImageTensor, gt: ImageTensor, warp: Option<WarpParams>) -> Result<Self> {
        if under.shape() != over.shape() || under.shape() != gt.shape() {
            return Err(Error::PairShape(format!(
                "under {:?}, over {:?}, gt {:?}",
                under.shape(),
                over.shape(),
                gt.shape()
            )));
        }
        Ok(ExposurePair { under, over, gt, warp })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.gt.shape()
    }

    /// Concatenates pairs along the batch axis. The warp of a stacked batch is
    /// dropped since each member may have its own.
    pub fn stack(pairs: &[&ExposurePair]) -> Result<ExposurePair> {
        let under: Vec<_> = pairs.iter().map(|p| &p.under).collect();
        let over: Vec<_> = pairs.iter().map(|p| &p.over).collect();
        let gt: Vec<_> = pairs.iter().map(|p| &p.gt).collect();
        let warp = if pairs.len() == 1 { pairs[0].warp } else { None };
        ExposurePair::new(ImageTensor::stack(&under)?, ImageTensor::stack(&over)?, ImageTensor::stack(&gt)?, warp)
    }
}
