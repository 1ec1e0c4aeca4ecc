//! Guided appearance attention: the reference branch attends with the
//! personalized branch's keys and a value extrapolated away from its own.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionTap, KvPair, TapMode};
use crate::error::{Error, Result};
use crate::field::Field;

pub const DEFAULT_ALPHA: f32 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// `V_gui = V_per + α·(V_per − V_ref)`.
pub fn value_guidance(v_per: &Field, v_ref: &Field, alpha: f32) -> Result<Field> {
    v_per.zip_with(v_ref, |p, r| p + alpha * (p - r))
}

/// Turns two recordings of the same block structure into a replacement tap
/// with `K := K_per` and `V := V_gui` for every block.
pub fn make_guided_tap(
    recorded_per: &AttentionTap,
    recorded_ref: &AttentionTap,
    cfg: &GuidanceConfig,
) -> Result<AttentionTap> {
    if !cfg.alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be finite, got {}", cfg.alpha)));
    }
    let (per, refr) = (&recorded_per.recorded, &recorded_ref.recorded);
    if recorded_per.mode != TapMode::Record || recorded_ref.mode != TapMode::Record {
        return Err(Error::Parameter("guided tap needs two recording taps".into()));
    }
    if per.len() != refr.len() || per.is_empty() {
        return Err(Error::Dimension(format!(
            "recordings hold {} and {} blocks",
            per.len(),
            refr.len()
        )));
    }
    let overrides = per
        .iter()
        .zip(refr)
        .map(|(p, r)| {
            if p.key.shape() != r.key.shape() {
                return Err(Error::Dimension(format!(
                    "key shapes {:?} vs {:?}",
                    p.key.shape(),
                    r.key.shape()
                )));
            }
            Ok(KvPair {
                key: p.key.clone(),
                value: value_guidance(&p.value, &r.value, cfg.alpha)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTap::replace(overrides, None))
}
