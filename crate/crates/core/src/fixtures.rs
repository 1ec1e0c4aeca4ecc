//! Synthetic inputs: a gradient background, two patterned concept images and
//! two disjoint square masks, all derived from one seed.
//!
//! Layout for an H×W image, with `s = min(H, W) / 4`:
//! - mask 1 is an s×s block with its top-left corner at row `[0, H−s]`,
//!   column `[0, W/2 − s]`;
//! - mask 2 is an s×s block at row `[0, H−s]`, column `[W/2, W−s]`.
//!
//! Both corners are drawn from the seed, so the masks never overlap.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::image_to_field;
use crate::error::{Error, Result};
use crate::field::{write_ltf, Rng};
use crate::mask::{save_mask, BinaryMask};
use crate::pnm::{write_image, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self { h: 32, w: 32, c: 3 }
    }
}

impl ImageSize {
    pub fn extension(&self) -> &'static str {
        if self.c == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }
}

pub fn mask_side(size: ImageSize) -> usize {
    (size.h.min(size.w) / 4).max(1)
}

#[derive(Debug, Clone)]
pub struct Fixtures {
    pub background: Image,
    pub concepts: [Image; 2],
    pub masks: [BinaryMask; 2],
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + ((rng.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render(size: ImageSize, f: impl Fn(f64, f64, usize) -> f64) -> Image {
    let ImageSize { h, w, c } = size;
    let mut pixels = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let (y, x) = ((r as f64 + 0.5) / h as f64, (col as f64 + 0.5) / w as f64);
            for ch in 0..c {
                pixels.push(to_u8(f(y, x, ch)));
            }
        }
    }
    Image::new(w, h, c, pixels).expect("fixture dims are valid")
}

pub fn build_fixtures(size: ImageSize, seed: u64) -> Result<Fixtures> {
    let ImageSize { h, w, c } = size;
    if h < 4 || w < 4 || !(c == 1 || c == 3) {
        return Err(Error::Parameter(format!(
            "fixtures need H, W >= 4 and C in {{1, 3}}, got {h}x{w}x{c}"
        )));
    }
    let mut rng = Rng::new(seed);
    let angle = rng.uniform() * TAU;
    let ring_freq = 10.0 + 8.0 * rng.uniform();
    let stripe_period = 3.0 + 3.0 * rng.uniform();
    let s = mask_side(size);
    let (r1, c1) = (pick(&mut rng, 0, h - s), pick(&mut rng, 0, w / 2 - s));
    let (r2, c2) = (pick(&mut rng, 0, h - s), pick(&mut rng, w / 2, w - s));

    let (ca, sa) = (angle.cos(), angle.sin());
    let background = render(size, |y, x, ch| {
        0.5 + 0.45 * ((x - 0.5) * ca + (y - 0.5) * sa) * 1.4 + 0.1 * ch as f64 - 0.1
    });
    let rings = render(size, |y, x, ch| {
        let d = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
        0.5 + 0.45 * (d * ring_freq * PI + ch as f64).cos()
    });
    let stripes = render(size, |y, x, ch| {
        let u = (x * w as f64 + y * h as f64) / stripe_period;
        if (u.floor() as i64 + ch as i64) % 2 == 0 {
            0.85
        } else {
            0.15
        }
    });
    let block = |r0: usize, c0: usize| {
        BinaryMask::from_fn(h, w, move |r, col| {
            (r0..r0 + s).contains(&r) && (c0..c0 + s).contains(&col)
        })
    };
    Ok(Fixtures {
        background,
        concepts: [rings, stripes],
        masks: [block(r1, c1), block(r2, c2)],
    })
}

/// Writes images (PGM/PPM plus LTF1), masks and a ready-to-run `config.json`.
pub fn write_fixtures(out_dir: &Path, size: ImageSize, seed: u64) -> Result<Fixtures> {
    let fx = build_fixtures(size, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ext = size.extension();
    let mut images = vec![("background".to_string(), &fx.background)];
    for (i, img) in fx.concepts.iter().enumerate() {
        images.push((format!("concept_{}", i + 1), img));
    }
    for (name, img) in images {
        write_image(&out_dir.join(format!("{name}.{ext}")), img)?;
        write_ltf(&out_dir.join(format!("{name}.ltf")), &image_to_field(img))?;
    }
    for (i, m) in fx.masks.iter().enumerate() {
        save_mask(m, &out_dir.join(format!("mask_{}.pgm", i + 1)))?;
    }
    let config = serde_json::json!({
        "image_size": size,
        "latent_factor": 1,
        "schedule": {"T": 50, "beta_start": 1e-4, "beta_end": 0.02},
        "seed": seed,
        "alpha": 0.15,
        "beta": 0.8,
        "box_margin": 2,
        "stages": {
            "guided_attention": true,
            "background_dilution": true,
            "ref_noise_resynthesis": true
        },
        "background": {"image_path": format!("background.{ext}"), "prompt": "a sunny park"},
        "concepts": [
            {"image_path": format!("concept_1.{ext}"), "mask_path": "mask_1.pgm", "prompt": "a ringed ball"},
            {"image_path": format!("concept_2.{ext}"), "mask_path": "mask_2.pgm", "prompt": "a striped box"}
        ],
        "output_dir": "out"
    });
    let json = serde_json::to_vec_pretty(&config).expect("config serializes");
    crate::field::write_atomic(&out_dir.join("config.json"), &json)?;
    Ok(fx)
}
