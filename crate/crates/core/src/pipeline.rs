//! Multi-branch blending loop.
//!
//! Branches per timestep:
//! - `back`: replays the background inversion.
//! - `per_i`: replays concept `i`'s inversion and records its attention K/V.
//! - `ref_i`: starts from the background terminal latent and attends with
//!   concept `i`'s keys and guided values.
//! - `out`: denoised with the mask-mixed noise of `back` and every `ref_i`.
//!
//! `out`, `back` and every `ref_i` consume the background track's noise maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{make_guided_tap, GuidanceConfig, DEFAULT_ALPHA};
use crate::denoiser::{AttentionTap, Denoiser, PromptEmbedding};
use crate::error::{Error, Result};
use crate::field::{hadamard, Field, Rng};
use crate::inversion::{invert, replay_step, NoiseMapTrack};
use crate::mask::{background_mask, expanded_box_mask, BinaryMask, DEFAULT_BOX_MARGIN};
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const DEFAULT_BETA: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub guided_attention: bool,
    pub background_dilution: bool,
    pub ref_noise_resynthesis: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self::ALL
    }
}

impl Stages {
    pub const NONE: Stages = Stages {
        guided_attention: false,
        background_dilution: false,
        ref_noise_resynthesis: false,
    };
    pub const ALL: Stages = Stages {
        guided_attention: true,
        background_dilution: true,
        ref_noise_resynthesis: true,
    };

    /// Cumulative ablation settings: (a) mask mixing only, (b) + guided
    /// attention, (c) + background dilution, (d) + reference-noise mixing.
    pub fn ablation(row: char) -> Option<Stages> {
        let n = match row {
            'a' => 0,
            'b' => 1,
            'c' => 2,
            'd' => 3,
            _ => return None,
        };
        Some(Stages {
            guided_attention: n >= 1,
            background_dilution: n >= 2,
            ref_noise_resynthesis: n >= 3,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha: f32,
    pub beta: f32,
    pub schedule: ScheduleParams,
    pub seed: u64,
    pub box_margin: usize,
    pub stages: Stages,
    /// Inclusive `[lo, hi]` timestep window for guided attention; `None`
    /// applies it at every step.
    pub guidance_steps: Option<[usize; 2]>,
    /// Worker threads for per-concept branches; 0 picks automatically.
    pub threads: usize,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            schedule: ScheduleParams::default(),
            seed: 0,
            box_margin: DEFAULT_BOX_MARGIN,
            stages: Stages::ALL,
            guidance_steps: None,
            threads: 0,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Parameter(format!("alpha must be finite, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Parameter(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if let Some([lo, hi]) = self.guidance_steps {
            if lo == 0 || lo > hi {
                return Err(Error::Parameter(format!(
                    "guidance window [{lo}, {hi}] is invalid"
                )));
            }
        }
        Ok(())
    }

    fn guides_at(&self, t: usize) -> bool {
        self.stages.guided_attention
            && self
                .guidance_steps
                .is_none_or(|[lo, hi]| (lo..=hi).contains(&t))
    }
}

#[derive(Debug, Clone)]
pub struct ConceptInput {
    pub image: Field,
    /// Object mask at latent resolution.
    pub mask: BinaryMask,
    pub prompt: String,
}

/// How often each optional stage ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub attention_records: u64,
    pub guided_passes: u64,
    pub dilution_mixes: u64,
    pub resynthesis_mixes: u64,
}

#[derive(Debug, Clone)]
pub struct BlendState {
    /// Timestep of the latents held; 0 once the loop has finished.
    pub t: usize,
    pub z_out: Field,
    pub z_back: Field,
    pub z_per: Vec<Field>,
    pub z_ref: Vec<Field>,
    pub mask_b: BinaryMask,
    pub masks: Vec<BinaryMask>,
    pub boxes: Vec<BinaryMask>,
    pub back_track: NoiseMapTrack,
    pub per_tracks: Vec<NoiseMapTrack>,
    pub back_cond: PromptEmbedding,
    pub concept_conds: Vec<PromptEmbedding>,
    pub counters: StageCounters,
    schedule: NoiseSchedule,
}

/// Everything one step computed, besides the new state.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: BlendState,
    pub eps_back: Field,
    pub eps_gui: Field,
    /// Reference noise after optional re-synthesis.
    pub eps_ref: Vec<Field>,
    /// Recorded K/V of each `per_i` and `ref_i` pass, when guidance ran.
    pub per_records: Vec<Option<AttentionTap>>,
    pub ref_records: Vec<Option<AttentionTap>>,
}

fn latent_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w, _] => Ok((h, w)),
        _ => Err(Error::Dimension(format!("latent must be H×W×C, got {shape:?}"))),
    }
}

fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Inverts the background and every concept, then seeds `out` and each
/// `ref_i` with copies of the background terminal latent.
pub fn prepare(
    background: &Field,
    background_prompt: &str,
    concepts: &[ConceptInput],
    cfg: &BlendConfig,
    d: &Denoiser,
) -> Result<BlendState> {
    cfg.validate()?;
    let schedule = NoiseSchedule::linear(cfg.schedule)?;
    d.check_latent_shape(background.shape())?;
    let (h, w) = latent_dims(background.shape())?;
    for (i, c) in concepts.iter().enumerate() {
        if c.image.shape() != background.shape() {
            return Err(Error::Dimension(format!(
                "concept {} image {:?} vs background {:?}",
                i + 1,
                c.image.shape(),
                background.shape()
            )));
        }
        if !c.image.is_finite() {
            return Err(Error::Numeric(format!("concept {} image is not finite", i + 1)));
        }
        if c.mask.dims() != (h, w) {
            return Err(Error::Dimension(format!(
                "concept {} mask {:?} vs latent {:?}",
                i + 1,
                c.mask.dims(),
                (h, w)
            )));
        }
        if c.mask.is_empty() {
            return Err(Error::EmptyMask);
        }
    }
    let masks: Vec<BinaryMask> = concepts.iter().map(|c| c.mask.clone()).collect();
    let mask_b = background_mask(h, w, &masks)?;
    let boxes = masks
        .iter()
        .map(|m| expanded_box_mask(m, cfg.box_margin))
        .collect::<Result<Vec<_>>>()?;

    let back_cond = d.embed(background_prompt);
    let concept_conds: Vec<PromptEmbedding> = concepts.iter().map(|c| d.embed(&c.prompt)).collect();

    // Stream 0 is the background, stream i + 1 is concept i.
    let inverted = run_in_pool(cfg.threads, || {
        let back = {
            let mut rng = Rng::new(Rng::derive_seed(cfg.seed, 0));
            invert(background, d, &back_cond, &schedule, &mut rng)
        };
        let per: Result<Vec<NoiseMapTrack>> = concepts
            .par_iter()
            .zip(&concept_conds)
            .enumerate()
            .map(|(i, (c, cond))| {
                let mut rng = Rng::new(Rng::derive_seed(cfg.seed, i as u64 + 1));
                invert(&c.image, d, cond, &schedule, &mut rng)
            })
            .collect();
        (back, per)
    })?;
    let back_track = inverted.0?;
    let per_tracks = inverted.1?;

    let z_back = back_track.x_t.clone();
    Ok(BlendState {
        t: schedule.steps(),
        z_out: z_back.clone(),
        z_per: per_tracks.iter().map(|tr| tr.x_t.clone()).collect(),
        z_ref: vec![z_back.clone(); concepts.len()],
        z_back,
        mask_b,
        masks,
        boxes,
        back_track,
        per_tracks,
        back_cond,
        concept_conds,
        counters: StageCounters::default(),
        schedule,
    })
}

struct ConceptStep {
    z_per: Field,
    eps_ref: Field,
    per_record: Option<AttentionTap>,
    ref_record: Option<AttentionTap>,
}

impl BlendState {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn concept_count(&self) -> usize {
        self.masks.len()
    }

    /// Mask-guided noise mixing: `ε_back ⊙ M_B + Σ ε_ref_i ⊙ M_i`.
    pub fn mix_noise(&self, eps_back: &Field, eps_ref: &[Field]) -> Result<Field> {
        let mut mixed = hadamard(eps_back, self.mask_b.field())?;
        for (eps, m) in eps_ref.iter().zip(&self.masks) {
            mixed = mixed.add(&hadamard(eps, m.field())?)?;
        }
        Ok(mixed)
    }

    fn concept_step(
        &self,
        i: usize,
        d: &Denoiser,
        cfg: &BlendConfig,
        guide: bool,
    ) -> Result<ConceptStep> {
        let t = self.t;
        let cond = &self.concept_conds[i];
        let mut per_tap = guide.then(AttentionTap::record);
        let eps_per = d.predict_noise(&self.z_per[i], t, cond, per_tap.as_mut())?;
        let z_per = replay_step(&self.per_tracks[i], &self.z_per[i], &eps_per, t, &self.schedule)?;

        let (eps_ref, ref_record) = match &per_tap {
            Some(per_tap) => {
                let mut ref_tap = AttentionTap::record();
                d.predict_noise(&self.z_ref[i], t, cond, Some(&mut ref_tap))?;
                let mut guided =
                    make_guided_tap(per_tap, &ref_tap, &GuidanceConfig { alpha: cfg.alpha })?;
                let eps = d.predict_noise(&self.z_ref[i], t, cond, Some(&mut guided))?;
                (eps, Some(ref_tap))
            }
            None => (d.predict_noise(&self.z_ref[i], t, cond, None)?, None),
        };
        Ok(ConceptStep {
            z_per,
            eps_ref,
            per_record: per_tap,
            ref_record,
        })
    }

    /// Advances every branch from `t` to `t − 1`.
    pub fn step(&self, d: &Denoiser, cfg: &BlendConfig) -> Result<StepOutcome> {
        let t = self.t;
        if t == 0 {
            return Err(Error::Parameter("blend loop already finished".into()));
        }
        let s = &self.schedule;
        let guide = cfg.guides_at(t);
        let n = self.concept_count();

        let eps_back = d.predict_noise(&self.z_back, t, &self.back_cond, None)?;
        let per_concept = (0..n)
            .into_par_iter()
            .map(|i| self.concept_step(i, d, cfg, guide))
            .collect::<Result<Vec<_>>>()?;

        let mut counters = self.counters;
        let mut z_per = Vec::with_capacity(n);
        let mut eps_ref = Vec::with_capacity(n);
        let mut per_records = Vec::with_capacity(n);
        let mut ref_records = Vec::with_capacity(n);
        for c in per_concept {
            if guide {
                counters.attention_records += 2;
                counters.guided_passes += 1;
            }
            z_per.push(c.z_per);
            eps_ref.push(c.eps_ref);
            per_records.push(c.per_record);
            ref_records.push(c.ref_record);
        }

        let eps_gui = self.mix_noise(&eps_back, &eps_ref)?;
        // Swap guidance would hook in here; it is not implemented.

        if cfg.stages.ref_noise_resynthesis {
            for (eps, m) in eps_ref.iter_mut().zip(&self.masks) {
                *eps = hadamard(eps, m.field())?.add(&hadamard(&eps_back, m.complement().field())?)?;
                counters.resynthesis_mixes += 1;
            }
        }

        let track = &self.back_track;
        let z_out = replay_step(track, &self.z_out, &eps_gui, t, s)?;
        let z_back = replay_step(track, &self.z_back, &eps_back, t, s)?;
        let mut z_ref = self
            .z_ref
            .iter()
            .zip(&eps_ref)
            .map(|(z, eps)| replay_step(track, z, eps, t, s))
            .collect::<Result<Vec<_>>>()?;

        if cfg.stages.background_dilution {
            for (z, m_e) in z_ref.iter_mut().zip(&self.boxes) {
                *z = dilute(&z_back, z, m_e, cfg.beta)?;
                counters.dilution_mixes += 1;
            }
        }

        let state = BlendState {
            t: t - 1,
            z_out,
            z_back,
            z_per,
            z_ref,
            counters,
            ..self.clone()
        };
        Ok(StepOutcome {
            state,
            eps_back,
            eps_gui,
            eps_ref,
            per_records,
            ref_records,
        })
    }
}

/// Background dilution: `z_back ⊙ β(1 − M_E) + z_ref ⊙ M_E`.
pub fn dilute(z_back: &Field, z_ref: &Field, m_e: &BinaryMask, beta: f32) -> Result<Field> {
    let outside = m_e.complement().field().scale(beta);
    hadamard(z_back, &outside)?.add(&hadamard(z_ref, m_e.field())?)
}

#[derive(Debug, Clone)]
pub struct BlendOutput {
    pub latent: Field,
    pub counters: StageCounters,
    /// Wall-clock time per denoising step, from `t = T` down.
    pub step_ms: Vec<f64>,
    /// Background reconstruction from the same run.
    pub background: Field,
}

/// `prepare` followed by `T` steps; returns `z_0` of the output branch.
pub fn generate(
    background: &Field,
    background_prompt: &str,
    concepts: &[ConceptInput],
    cfg: &BlendConfig,
    d: &Denoiser,
) -> Result<BlendOutput> {
    let mut state = prepare(background, background_prompt, concepts, cfg, d)?;
    let mut step_ms = Vec::with_capacity(state.t);
    run_in_pool(cfg.threads, || -> Result<()> {
        while state.t > 0 {
            let start = std::time::Instant::now();
            state = state.step(d, cfg)?.state;
            step_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(())
    })??;
    Ok(BlendOutput {
        latent: state.z_out,
        counters: state.counters,
        step_ms,
        background: state.z_back,
    })
}
