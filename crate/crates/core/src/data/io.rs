use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::Array4;

use super::ImageTensor;
use crate::error::{Error, Result};

/// Reads an 8- or 16-bit RGB image, normalizing by the maximum code value and
/// cropping height and width down to multiples of 4.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let unreadable = |reason: String| Error::UnreadableImage { path: path.to_path_buf(), reason };
    let reader = image::ImageReader::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| unreadable(e.to_string()))?;
    let img = reader.decode().map_err(|e| unreadable(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (hc, wc) = (h / 4 * 4, w / 4 * 4);
    if hc == 0 || wc == 0 {
        return Err(unreadable(format!("image {w}x{h} is smaller than 4x4")));
    }
    let mut arr = Array4::zeros((1, 3, hc, wc));
    match img {
        DynamicImage::ImageRgb8(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                if (y as usize) < hc && (x as usize) < wc {
                    for c in 0..3 {
                        arr[[0, c, y as usize, x as usize]] = p[c] as f64 / 255.0;
                    }
                }
            }
        }
        DynamicImage::ImageRgb16(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                if (y as usize) < hc && (x as usize) < wc {
                    for c in 0..3 {
                        arr[[0, c, y as usize, x as usize]] = p[c] as f64 / 65535.0;
                    }
                }
            }
        }
        other => return Err(Error::UnsupportedFormat(format!("{}: {:?} is not RGB", path.display(), other.color()))),
    }
    ImageTensor::new(arr)
}

/// Writes the first image of the batch as an 8-bit RGB PNG.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let a = img.array();
    let (h, w) = (img.height(), img.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (a[[0, c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    })
}
