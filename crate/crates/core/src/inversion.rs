//! Edit-friendly DDPM inversion.
//!
//! The forward path draws a fresh Gaussian for every timestep, then the noise
//! maps `z_t = (x_{t−1} − μ̂_t(x_t)) / σ_t` are solved for from `t = T` down
//! to 2 so that ancestral sampling replays the path. Extraction walks the
//! same arithmetic as [`replay`], so replay retraces it bit for bit.
//!
//! Because `σ_1 = 0`, the last step cannot absorb a noise map. `z_1` is kept
//! at zero and the track instead stores the deterministic residual
//! `x_0 − μ̂_1(x_1)`, added once after the final step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionTap, Denoiser, PromptEmbedding};
use crate::error::{Error, Result};
use crate::field::{read_ltf, write_atomic, write_ltf, Field, Rng};
use crate::schedule::{NoiseSchedule, ScheduleParams};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMapTrack {
    /// Terminal latent `x_T`.
    pub x_t: Field,
    /// `z[t − 1]` holds the noise map of timestep `t`; `z[0]` is all zeros.
    pub z: Vec<Field>,
    pub final_residual: Field,
    pub cond_tokens: Vec<String>,
    pub schedule: ScheduleParams,
}

impl NoiseMapTrack {
    pub fn shape(&self) -> &[usize] {
        self.x_t.shape()
    }

    pub fn steps(&self) -> usize {
        self.z.len()
    }

    pub fn noise_map(&self, t: usize) -> &Field {
        &self.z[t - 1]
    }

    fn check(&self, s: &NoiseSchedule) -> Result<()> {
        if self.schedule != s.params() || self.z.len() != s.steps() {
            return Err(Error::Parameter(format!(
                "track built for {:?}, schedule is {:?}",
                self.schedule,
                s.params()
            )));
        }
        let shape = self.x_t.shape();
        if self.z.iter().any(|z| z.shape() != shape) || self.final_residual.shape() != shape {
            return Err(Error::Dimension("noise maps disagree on shape".into()));
        }
        Ok(())
    }
}

/// `√ᾱ·x_0 + √(1−ᾱ)·ε`.
pub fn noised(x0: &Field, alpha_bar: f64, eps: &Field) -> Result<Field> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_with(eps, |x, e| (a * f64::from(x) + b * f64::from(e)) as f32)
}

/// Returns `x_1..x_T`, each built from its own noise draw (drawn in
/// ascending `t`).
pub fn noising_path(x0: &Field, s: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<Field>> {
    if !x0.is_finite() {
        return Err(Error::Numeric("non-finite source image".into()));
    }
    (1..=s.steps())
        .map(|t| {
            let eps = rng.randn(x0.shape());
            noised(x0, s.alpha_bar(t), &eps)
        })
        .collect()
}

pub fn extract_noise_maps(
    x0: &Field,
    path: &[Field],
    d: &Denoiser,
    cond: &PromptEmbedding,
    s: &NoiseSchedule,
) -> Result<NoiseMapTrack> {
    let steps = s.steps();
    if path.len() != steps {
        return Err(Error::Parameter(format!(
            "path has {} latents, schedule has {steps} steps",
            path.len()
        )));
    }
    if path.iter().any(|x| x.shape() != x0.shape()) {
        return Err(Error::Dimension("path latents disagree with x0 shape".into()));
    }
    d.check_latent_shape(x0.shape())?;

    let mut z = vec![Field::zeros(x0.shape()); steps];
    let mut x_cur = path[steps - 1].clone();
    for t in (2..=steps).rev() {
        let eps = d.predict_noise(&x_cur, t, cond, None)?;
        let mean = s.posterior_mean(&x_cur, &eps, t)?;
        let sigma = s.posterior_sigma(t)?;
        if sigma <= 0.0 {
            return Err(Error::Numeric(format!("sigma_{t} is zero")));
        }
        let z_t = path[t - 2].zip_with(&mean, |x, m| ((f64::from(x) - f64::from(m)) / sigma) as f32)?;
        x_cur = s.reverse_step(&x_cur, &eps, &z_t, t)?;
        z[t - 1] = z_t;
    }
    let eps = d.predict_noise(&x_cur, 1, cond, None)?;
    let mean = s.reverse_step(&x_cur, &eps, &z[0], 1)?;
    let final_residual = x0.sub(&mean)?;
    Ok(NoiseMapTrack {
        x_t: path[steps - 1].clone(),
        z,
        final_residual,
        cond_tokens: cond.tokens().to_vec(),
        schedule: s.params(),
    })
}

/// Noising path plus extraction in one call.
pub fn invert(
    x0: &Field,
    d: &Denoiser,
    cond: &PromptEmbedding,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<NoiseMapTrack> {
    let path = noising_path(x0, s, rng)?;
    extract_noise_maps(x0, &path, d, cond, s)
}

/// One reverse step `x_t → x_{t−1}` driven by the track's noise map, with
/// the final residual folded in at `t = 1`.
pub fn replay_step(
    track: &NoiseMapTrack,
    x_t: &Field,
    eps: &Field,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Field> {
    let next = s.reverse_step(x_t, eps, track.noise_map(t), t)?;
    if t == 1 {
        next.add(&track.final_residual)
    } else {
        Ok(next)
    }
}

/// Runs the reverse process from `x_T` with the stored noise maps. `taps`, if
/// given, holds one tap per timestep at index `t − 1`.
pub fn replay(
    track: &NoiseMapTrack,
    d: &Denoiser,
    cond: &PromptEmbedding,
    s: &NoiseSchedule,
    mut taps: Option<&mut [AttentionTap]>,
) -> Result<Field> {
    track.check(s)?;
    if let Some(taps) = taps.as_deref() {
        if taps.len() != s.steps() {
            return Err(Error::Parameter(format!(
                "{} taps for {} steps",
                taps.len(),
                s.steps()
            )));
        }
    }
    let mut x = track.x_t.clone();
    for t in (1..=s.steps()).rev() {
        let tap = taps.as_deref_mut().map(|taps| &mut taps[t - 1]);
        let eps = d.predict_noise(&x, t, cond, tap)?;
        x = replay_step(track, &x, &eps, t, s)?;
    }
    Ok(x)
}

/// Deterministic (η = 0) DDIM inversion, kept as a diagnostic baseline.
#[derive(Debug, Clone)]
pub struct DdimInversion {
    /// `x_0..x_T` along the DDIM trajectory.
    pub trajectory: Vec<Field>,
    /// Same layout as an edit-friendly track; `z[t − 1]` holds the DDPM noise
    /// map implied by the DDIM trajectory, `(x_{t−1} − μ̂_t(x_t)) / σ_t`.
    pub track: NoiseMapTrack,
}

pub fn ddim_invert(
    x0: &Field,
    d: &Denoiser,
    cond: &PromptEmbedding,
    s: &NoiseSchedule,
) -> Result<DdimInversion> {
    d.check_latent_shape(x0.shape())?;
    let steps = s.steps();
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(x0.clone());
    for t in 1..=steps {
        let prev = &trajectory[t - 1];
        let eps = d.predict_noise(prev, t, cond, None)?;
        let (ab_prev, ab) = (s.alpha_bar(t - 1), s.alpha_bar(t));
        let next = prev.zip_with(&eps, |x, e| {
            let (x, e) = (f64::from(x), f64::from(e));
            let x0_hat = (x - (1.0 - ab_prev).sqrt() * e) / ab_prev.sqrt();
            (ab.sqrt() * x0_hat + (1.0 - ab).sqrt() * e) as f32
        })?;
        trajectory.push(next);
    }
    let mut z = vec![Field::zeros(x0.shape()); steps];
    for t in 2..=steps {
        let x_t = &trajectory[t];
        let eps = d.predict_noise(x_t, t, cond, None)?;
        let mean = s.posterior_mean(x_t, &eps, t)?;
        let sigma = s.posterior_sigma(t)?;
        z[t - 1] = trajectory[t - 1]
            .zip_with(&mean, |x, m| ((f64::from(x) - f64::from(m)) / sigma) as f32)?;
    }
    let track = NoiseMapTrack {
        x_t: trajectory[steps].clone(),
        z,
        final_residual: Field::zeros(x0.shape()),
        cond_tokens: cond.tokens().to_vec(),
        schedule: s.params(),
    };
    Ok(DdimInversion { trajectory, track })
}

/// Deterministic DDIM sampling from `x_T` back to `x_0`.
pub fn ddim_reconstruct(
    x_t: &Field,
    d: &Denoiser,
    cond: &PromptEmbedding,
    s: &NoiseSchedule,
) -> Result<Field> {
    let mut x = x_t.clone();
    for t in (1..=s.steps()).rev() {
        let eps = d.predict_noise(&x, t, cond, None)?;
        let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        x = x.zip_with(&eps, |xv, e| {
            let (xv, e) = (f64::from(xv), f64::from(e));
            let x0_hat = (xv - (1.0 - ab).sqrt() * e) / ab.sqrt();
            (ab_prev.sqrt() * x0_hat + (1.0 - ab_prev).sqrt() * e) as f32
        })?;
    }
    Ok(x)
}

/// Population variance of all elements.
pub fn variance(f: &Field) -> f64 {
    let n = f.len() as f64;
    let mean = f.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    f.data()
        .iter()
        .map(|&x| (f64::from(x) - mean).powi(2))
        .sum::<f64>()
        / n
}

/// Pearson correlation of two equally shaped fields; 0 when either is constant.
pub fn correlation(a: &Field, b: &Field) -> f64 {
    let n = a.len() as f64;
    let ma = a.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let mb = b.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Per-timestep noise-map statistics over `t ∈ [2, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    /// `(t, variance of z_t)`.
    pub variance: Vec<(usize, f64)>,
    /// `(t, corr(z_t, z_{t+1}))` for `t ∈ [2, T−1]`.
    pub adjacent_corr: Vec<(usize, f64)>,
}

impl NoiseStats {
    pub fn of(track: &NoiseMapTrack) -> Self {
        let steps = track.steps();
        let variance = (2..=steps).map(|t| (t, variance(track.noise_map(t)))).collect();
        let adjacent_corr = (2..steps)
            .map(|t| (t, correlation(track.noise_map(t), track.noise_map(t + 1))))
            .collect();
        Self {
            variance,
            adjacent_corr,
        }
    }

    pub fn mean_variance(&self) -> f64 {
        mean(self.variance.iter().map(|v| v.1))
    }

    pub fn mean_adjacent_corr(&self) -> f64 {
        mean(self.adjacent_corr.iter().map(|v| v.1))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackManifest {
    schedule: ScheduleParams,
    cond_tokens: Vec<String>,
    shape: Vec<usize>,
}

fn noise_map_name(t: usize) -> String {
    format!("z_{t:04}.ltf")
}

/// Writes `x_T.ltf`, `z_0002.ltf..z_TTTT.ltf`, `x0_residual.ltf` and
/// `manifest.json` into `dir`. `z_1` is always zero and is not written.
pub fn save_track(dir: &Path, track: &NoiseMapTrack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ltf(&dir.join("x_T.ltf"), &track.x_t)?;
    for t in 2..=track.steps() {
        write_ltf(&dir.join(noise_map_name(t)), track.noise_map(t))?;
    }
    write_ltf(&dir.join("x0_residual.ltf"), &track.final_residual)?;
    let manifest = TrackManifest {
        schedule: track.schedule,
        cond_tokens: track.cond_tokens.clone(),
        shape: track.shape().to_vec(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn load_track(dir: &Path) -> Result<NoiseMapTrack> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: TrackManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let load = |name: &str| -> Result<Field> {
        let path = dir.join(name);
        let f = read_ltf(&path)?;
        if f.shape() != manifest.shape.as_slice() {
            return Err(Error::format(&path, "shape disagrees with manifest"));
        }
        Ok(f)
    };
    let x_t = load("x_T.ltf")?;
    let steps = manifest.schedule.steps;
    let mut z = vec![Field::zeros(&manifest.shape)];
    for t in 2..=steps {
        z.push(load(&noise_map_name(t))?);
    }
    Ok(NoiseMapTrack {
        x_t,
        z,
        final_residual: load("x0_residual.ltf")?,
        cond_tokens: manifest.cond_tokens,
        schedule: manifest.schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Denoiser, PromptEmbedding, NoiseSchedule) {
        let d = Denoiser::default();
        let cond = d.embed("a photo");
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        (d, cond, s)
    }

    fn image(seed: u64, shape: &[usize]) -> Field {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Field::new(shape, (0..n).map(|_| (2.0 * rng.uniform() - 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn noiseless_limit() {
        let x0 = image(1, &[4, 4, 1]);
        let eps = Rng::new(2).randn(&[4, 4, 1]);
        assert_eq!(noised(&x0, 1.0, &eps).unwrap(), x0);
    }

    #[test]
    fn path_uses_fresh_noise_per_step() {
        let (_, _, s) = setup();
        let x0 = Field::zeros(&[4, 4, 1]);
        let path = noising_path(&x0, &s, &mut Rng::new(3)).unwrap();
        assert_eq!(path.len(), 50);
        // With x0 = 0 each x_t is a scaled draw; distinct draws are not proportional.
        let r = correlation(&path[10], &path[11]);
        assert!(r.abs() < 0.9);
        // Draw order: the first draw belongs to t = 1.
        let first = Rng::new(3).randn(&[4, 4, 1]).scale((1.0 - s.alpha_bar(1)).sqrt() as f32);
        assert!(path[0].max_abs_diff(&first).unwrap() < 1e-7);
    }

    #[test]
    fn round_trip_is_exact() {
        let (d, cond, s) = setup();
        let x0 = image(4, &[16, 16, 1]);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(4)).unwrap();
        let back = replay(&track, &d, &cond, &s, None).unwrap();
        assert!(x0.max_abs_diff(&back).unwrap() < 1e-4);
        let again = replay(&track, &d, &cond, &s, None).unwrap();
        assert!(back.bit_eq(&again));
    }

    #[test]
    fn zeroed_noise_maps_do_not_reconstruct() {
        let (d, cond, s) = setup();
        let x0 = image(5, &[16, 16, 1]);
        let mut track = invert(&x0, &d, &cond, &s, &mut Rng::new(5)).unwrap();
        track.z.iter_mut().for_each(|z| *z = Field::zeros(z.shape()));
        let back = replay(&track, &d, &cond, &s, None).unwrap();
        assert!(x0.max_abs_diff(&back).unwrap() > 1e-3);
    }

    #[test]
    fn replay_with_recording_taps_is_unchanged() {
        let (d, cond, s) = setup();
        let x0 = image(6, &[8, 8, 3]);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(6)).unwrap();
        let plain = replay(&track, &d, &cond, &s, None).unwrap();
        let mut taps = vec![AttentionTap::record(); 50];
        let tapped = replay(&track, &d, &cond, &s, Some(&mut taps)).unwrap();
        assert!(plain.bit_eq(&tapped));
        assert!(taps.iter().all(|tap| tap.recorded.len() == 2));
        assert!(replay(&track, &d, &cond, &s, Some(&mut taps[..3])).is_err());
    }

    #[test]
    fn z1_has_no_effect_and_z2_acts_through_sigma2() {
        let (d, cond, s) = setup();
        let x0 = image(7, &[8, 8, 1]);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(7)).unwrap();
        let base = replay(&track, &d, &cond, &s, None).unwrap();

        let mut bumped = track.clone();
        bumped.z[0] = Field::full(x0.shape(), 0.5);
        assert!(replay(&bumped, &d, &cond, &s, None).unwrap().bit_eq(&base));

        // Perturbing z_2 shifts x_1 by σ_2·δ; the last step maps that through
        // μ̂_1, whose Jacobian is approximately 1/√α_1 for small inputs.
        let delta = 1e-2f32;
        let mut bumped = track.clone();
        bumped.z[1].data_mut()[10] += delta;
        let out = replay(&bumped, &d, &cond, &s, None).unwrap();
        let slope = f64::from(out.data()[10] - base.data()[10]) / f64::from(delta);
        let expected = s.posterior_sigma(2).unwrap() / s.alpha(1).sqrt();
        assert!((slope - expected).abs() < 1e-3, "slope {slope} expected {expected}");
    }

    #[test]
    fn ddim_is_deterministic_and_worse_at_reconstruction() {
        let (d, cond, s) = setup();
        let x0 = image(8, &[16, 16, 1]);
        let a = ddim_invert(&x0, &d, &cond, &s).unwrap();
        let b = ddim_invert(&x0, &d, &cond, &s).unwrap();
        assert!(a.track.x_t.bit_eq(&b.track.x_t));
        let ddim_err = x0
            .max_abs_diff(&ddim_reconstruct(&a.track.x_t, &d, &cond, &s).unwrap())
            .unwrap();
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(8)).unwrap();
        let ef_err = x0
            .max_abs_diff(&replay(&track, &d, &cond, &s, None).unwrap())
            .unwrap();
        assert!(ddim_err >= ef_err);
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let (d, cond, s) = setup();
        let x0 = image(9, &[8, 8, 1]);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(9)).unwrap();
        let other = crate::schedule::linear_schedule(20, 1e-4, 0.02).unwrap();
        assert!(replay(&track, &d, &cond, &other, None).is_err());
    }

    #[test]
    fn track_directory_round_trip() {
        let (d, cond, s) = setup();
        let x0 = image(10, &[8, 8, 1]);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_track(dir.path(), &track).unwrap();
        assert!(dir.path().join("z_0002.ltf").exists());
        assert!(!dir.path().join("z_0001.ltf").exists());
        let loaded = load_track(dir.path()).unwrap();
        assert_eq!(loaded, track);
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["schedule"]["T"], 50);
        assert_eq!(manifest["cond_tokens"][1], "photo");
    }

    #[test]
    fn correlation_basics() {
        let a = Rng::new(1).randn(&[100]);
        assert!((correlation(&a, &a) - 1.0).abs() < 1e-12);
        assert!((correlation(&a, &a.scale(-2.0)) + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&a, &Field::zeros(&[100])), 0.0);
    }
}
