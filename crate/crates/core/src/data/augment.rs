//! Paired geometric augmentation: random crop, flips and quarter turns.

use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExposurePair, ImageTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Square crop size; `None` keeps the full frame.
    pub patch: Option<usize>,
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { patch: Some(128), hflip: true, vflip: true, rotate: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { patch: None, hflip: false, vflip: false, rotate: false }
    }

    pub fn with_patch(patch: usize) -> Self {
        AugmentConfig { patch: Some(patch), ..Default::default() }
    }
}

/// One concrete draw of the augmentation, applicable to any image of the
/// source size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Number of counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, cw) = match cfg.patch {
            Some(p) if p > height || p > width => return Err(Error::PatchExceedsImage { patch: p, height, width }),
            Some(p) if p % 4 != 0 || p == 0 => {
                return Err(Error::InvalidParameter(format!("patch size {p} is not a nonzero multiple of 4")))
            }
            Some(p) => (p, p),
            None => (height, width),
        };
        let top = rng.random_range(0..=height - ch);
        let left = rng.random_range(0..=width - cw);
        let hflip = cfg.hflip && rng.random_bool(0.5);
        let vflip = cfg.vflip && rng.random_bool(0.5);
        let quarter_turns = match (cfg.rotate, ch == cw) {
            (false, _) => 0,
            (true, true) => rng.random_range(0..4),
            (true, false) => 2 * rng.random_range(0..2),
        };
        Ok(AugmentParams { top, left, height: ch, width: cw, hflip, vflip, quarter_turns })
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let mut a: Array4<f64> =
            img.array().slice(s![.., .., self.top..self.top + self.height, self.left..self.left + self.width]).to_owned();
        if self.hflip {
            a.invert_axis(Axis(3));
        }
        if self.vflip {
            a.invert_axis(Axis(2));
        }
        for _ in 0..self.quarter_turns {
            // Counter-clockwise: transpose spatial axes then flip rows.
            let mut t = a.permuted_axes([0, 1, 3, 2]);
            t.invert_axis(Axis(2));
            a = t.as_standard_layout().to_owned();
        }
        ImageTensor::new(a.as_standard_layout().to_owned()).expect("crop sizes are multiples of 4")
    }
}

/// Applies one sampled crop/flip/rotation identically to all three images.
pub fn augment(pair: &ExposurePair, cfg: &AugmentConfig, seed: u64) -> Result<ExposurePair> {
    let params = AugmentParams::sample(cfg, pair.gt.height(), pair.gt.width(), seed)?;
    ExposurePair::new(params.apply(&pair.under), params.apply(&pair.over), params.apply(&pair.gt), pair.warp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scene, synth_pair, SynthConfig};

    fn pair() -> ExposurePair {
        synth_pair(&scene(40, 48, 5).unwrap(), &SynthConfig::default(), false).unwrap()
    }

    #[test]
    fn deterministic_and_noop() {
        let p = pair();
        let cfg = AugmentConfig::with_patch(32);
        assert_eq!(augment(&p, &cfg, 11).unwrap(), augment(&p, &cfg, 11).unwrap());
        assert_eq!(augment(&p, &AugmentConfig::none(), 11).unwrap(), p);
    }

    #[test]
    fn patch_too_large() {
        let err = augment(&pair(), &AugmentConfig::with_patch(64), 0).unwrap_err();
        assert!(matches!(err, Error::PatchExceedsImage { patch: 64, height: 40, width: 48 }));
    }

    #[test]
    fn double_hflip_recovers_crop() {
        let p = pair();
        let mut params = AugmentParams::sample(&AugmentConfig::with_patch(32), 40, 48, 3).unwrap();
        params.vflip = false;
        params.quarter_turns = 0;
        params.hflip = false;
        let crop = params.apply(&p.gt);
        params.hflip = true;
        let once = params.apply(&p.gt);
        assert_ne!(once, crop);
        let back = AugmentParams { top: 0, left: 0, ..params }.apply(&once);
        assert_eq!(back, crop);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let p = pair();
        let base = AugmentParams { top: 4, left: 8, height: 32, width: 32, hflip: false, vflip: false, quarter_turns: 0 };
        let once = AugmentParams { quarter_turns: 1, ..base }.apply(&p.gt);
        let mut x = once.clone();
        let id = AugmentParams { top: 0, left: 0, quarter_turns: 1, ..base };
        for _ in 0..3 {
            x = id.apply(&x);
        }
        assert_eq!(x, base.apply(&p.gt));
        // One quarter turn moves the top-right corner to the top-left.
        assert_eq!(once.array()[[0, 0, 0, 0]], base.apply(&p.gt).array()[[0, 0, 0, 31]]);
    }
}
