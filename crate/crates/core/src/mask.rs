//! Hard {0, 1} masks: background derivation, bounding boxes, resampling and
//! PGM I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::pnm::{read_image, write_image, Image};

pub const DEFAULT_BOX_MARGIN: usize = 2;

/// An H×W field whose values are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Field);

impl BinaryMask {
    pub fn new(field: Field) -> Result<Self> {
        if field.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "mask must be H×W, got {:?}",
                field.shape()
            )));
        }
        if field.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(Self(field))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| if f(i / width, i % width) { 1.0 } else { 0.0 })
            .collect();
        Self(Field::new(&[height, width], data).expect("positive dims"))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Field::zeros(&[height, width]))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self(Field::ones(&[height, width]))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0.data()[row * self.width() + col] == 1.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    /// `1 − m`.
    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| 1.0 - v))
    }

    /// Pointwise `self ⊇ other`.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .0
                .data()
                .iter()
                .zip(other.0.data())
                .all(|(&a, &b)| a >= b)
    }

    /// Support bounding box as `(row_min, row_max, col_min, col_max)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height() {
            for c in 0..self.width() {
                if self.get(r, c) {
                    bbox = Some(match bbox {
                        None => (r, r, c, c),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                    });
                }
            }
        }
        bbox
    }
}

/// `M_B = 1 − Σ M_i`, after checking that the object masks are disjoint.
pub fn background_mask(height: usize, width: usize, masks: &[BinaryMask]) -> Result<BinaryMask> {
    let mut coverage = vec![0u32; height * width];
    for m in masks {
        if m.dims() != (height, width) {
            return Err(Error::Dimension(format!(
                "mask is {:?}, expected {:?}",
                m.dims(),
                (height, width)
            )));
        }
        for (c, &v) in coverage.iter_mut().zip(m.0.data()) {
            *c += v as u32;
        }
    }
    if let Some(i) = coverage.iter().position(|&c| c > 1) {
        return Err(Error::Overlap {
            row: i / width,
            col: i % width,
        });
    }
    Ok(BinaryMask::from_fn(height, width, |r, c| {
        coverage[r * width + c] == 0
    }))
}

/// Bounding box of the support grown by `margin` on every side and clamped
/// to the frame.
pub fn expanded_box_mask(m: &BinaryMask, margin: usize) -> Result<BinaryMask> {
    let (r0, r1, c0, c1) = m.bounding_box().ok_or(Error::EmptyMask)?;
    let (h, w) = m.dims();
    let (r0, c0) = (r0.saturating_sub(margin), c0.saturating_sub(margin));
    let (r1, c1) = ((r1 + margin).min(h - 1), (c1 + margin).min(w - 1));
    Ok(BinaryMask::from_fn(h, w, |r, c| {
        (r0..=r1).contains(&r) && (c0..=c1).contains(&c)
    }))
}

/// Block-max pooling: a block is set if any of its pixels is.
pub fn downsample_mask(m: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let (h, w) = m.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Parameter(format!(
            "factor {factor} does not divide {h}x{w}"
        )));
    }
    Ok(BinaryMask::from_fn(h / factor, w / factor, |br, bc| {
        (0..factor).any(|i| (0..factor).any(|j| m.get(br * factor + i, bc * factor + j)))
    }))
}

/// Reads a P5 mask; pixels ≥ 128 become 1. `expected` is `(height, width)`.
pub fn load_mask(path: &Path, expected: Option<(usize, usize)>) -> Result<BinaryMask> {
    let img = read_image(path)?;
    if img.channels != 1 {
        return Err(Error::format(path, "mask must be a P5 grayscale image"));
    }
    if let Some((h, w)) = expected {
        if (img.height, img.width) != (h, w) {
            return Err(Error::format(
                path,
                format!("mask is {}x{}, expected {h}x{w}", img.height, img.width),
            ));
        }
    }
    let data = img
        .pixels
        .iter()
        .map(|&p| if p >= 128 { 1.0 } else { 0.0 })
        .collect();
    BinaryMask::new(Field::new(&[img.height, img.width], data)?)
}

pub fn save_mask(m: &BinaryMask, path: &Path) -> Result<()> {
    let pixels = m.0.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
    write_image(path, &Image::new(m.width(), m.height(), 1, pixels)?)
}
