//! Fixed affine map between 8-bit images and latents in [−1, 1], with
//! block-mean pooling when the latent grid is coarser than the image.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::pnm::Image;

/// `p / 255 · 2 − 1` per sample, as an H×W×C field.
pub fn image_to_field(img: &Image) -> Field {
    let data = img
        .pixels
        .iter()
        .map(|&p| (f64::from(p) / 255.0 * 2.0 - 1.0) as f32)
        .collect();
    Field::new(&[img.height, img.width, img.channels], data).expect("image dims are positive")
}

/// `factor`×`factor` block means over the spatial axes of an H×W×C field.
pub fn pool_field(f: &Field, factor: usize) -> Result<Field> {
    let (h, w, c) = match *f.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::Dimension(format!("expected H×W×C, got {:?}", f.shape()))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Parameter(format!(
            "latent factor {factor} does not divide {h}x{w}"
        )));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let (lh, lw) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut data = Vec::with_capacity(lh * lw * c);
    for br in 0..lh {
        for bc in 0..lw {
            for ch in 0..c {
                let mut sum = 0.0f64;
                for i in 0..factor {
                    for j in 0..factor {
                        sum += f64::from(f.data()[((br * factor + i) * w + bc * factor + j) * c + ch]);
                    }
                }
                data.push((sum * inv) as f32);
            }
        }
    }
    Field::new(&[lh, lw, c], data)
}

pub fn encode_image(img: &Image, factor: usize) -> Result<Field> {
    pool_field(&image_to_field(img), factor)
}

/// `clamp((z + 1) / 2, 0, 1) · 255`, rounded half away from zero.
pub fn decode(z0: &Field) -> Result<Image> {
    let (h, w, c) = match *z0.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::Dimension(format!("expected H×W×C, got {:?}", z0.shape()))),
    };
    if !(c == 1 || c == 3) {
        return Err(Error::Parameter(format!("cannot decode {c} channels")));
    }
    if !z0.is_finite() {
        return Err(Error::Numeric("latent is not finite".into()));
    }
    let pixels = z0
        .data()
        .iter()
        .map(|&z| (((f64::from(z) + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image::new(w, h, c, pixels)
}
