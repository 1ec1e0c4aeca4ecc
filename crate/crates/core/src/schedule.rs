//! Linear DDPM noise schedule and the ε-parameterized reverse-step statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Per-step coefficients, indexed by timestep `t` in `1..=T`.
///
/// Index 0 of `alpha_bar` holds the convention `ᾱ_0 = 1`, so `σ_1 = 0` and the
/// last reverse step is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(ScheduleParams {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn linear(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        let valid = steps >= 1
            && beta_start.is_finite()
            && beta_end.is_finite()
            && 0.0 < beta_start
            && beta_start <= beta_end
            && beta_end < 1.0;
        if !valid {
            return Err(Error::Parameter(format!(
                "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, \
                 beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        for (i, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (i - 1) as f64 / (steps - 1) as f64
            };
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
        }
        Ok(Self {
            params,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `μ̂_t = (x_t − β_t/√(1−ᾱ_t)·ε) / √α_t`.
    pub fn posterior_mean(&self, x_t: &Field, eps_pred: &Field, t: usize) -> Result<Field> {
        self.check_step(t)?;
        let inv_sqrt_alpha = 1.0 / self.alpha[t].sqrt();
        let eps_coef = self.beta[t] / (1.0 - self.alpha_bar[t]).sqrt();
        x_t.zip_with(eps_pred, |x, e| {
            ((f64::from(x) - eps_coef * f64::from(e)) * inv_sqrt_alpha) as f32
        })
    }

    /// `σ_t = √(β_t·(1−ᾱ_{t−1})/(1−ᾱ_t))`.
    pub fn posterior_sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigma[t])
    }

    /// One ancestral step: `μ̂_t(x_t) + σ_t·z`.
    pub fn reverse_step(&self, x_t: &Field, eps_pred: &Field, z: &Field, t: usize) -> Result<Field> {
        let mean = self.posterior_mean(x_t, eps_pred, t)?;
        let sigma = self.sigma[t];
        mean.zip_with(z, |m, zv| (f64::from(m) + sigma * f64::from(zv)) as f32)
    }
}

pub fn posterior_mean(x_t: &Field, eps_pred: &Field, t: usize, s: &NoiseSchedule) -> Result<Field> {
    s.posterior_mean(x_t, eps_pred, t)
}

pub fn posterior_sigma(t: usize, s: &NoiseSchedule) -> Result<f64> {
    s.posterior_sigma(t)
}
