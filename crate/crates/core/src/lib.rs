//! Tuning-free multi-concept image blending on top of edit-friendly DDPM
//! inversion, at desk scale with an untrained attention denoiser.

pub mod attention;
pub mod cli;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod field;
pub mod fixtures;
pub mod inversion;
pub mod mask;
pub mod pipeline;
pub mod pnm;
pub mod schedule;

pub use error::{Error, Result};
pub use field::{Field, Rng};
