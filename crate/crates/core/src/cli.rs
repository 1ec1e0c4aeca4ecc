//! `flipconcept` command line: fixtures, inversion, generation, diagnostics.
//!
//! Exit codes: 0 success, 1 config error, 2 I/O error, 3 numeric-contract
//! failure, 4 overlapping masks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode_image, pool_field};
use crate::denoiser::{build_denoiser, Denoiser, DEFAULT_BLOCKS, DEFAULT_EMBED_DIM, DEFAULT_PATCH_SIZE};
use crate::error::Error;
use crate::field::{read_ltf, write_atomic, write_ltf, Field, Rng};
use crate::fixtures::{write_fixtures, ImageSize};
use crate::inversion::{ddim_invert, invert, replay, save_track, NoiseStats};
use crate::mask::{downsample_mask, load_mask};
use crate::pipeline::{generate, BlendConfig, ConceptInput, Stages};
use crate::pnm::{read_image, write_image};
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_OVERLAP: i32 = 4;

pub const RECONSTRUCTION_TOLERANCE: f32 = 1e-4;
pub const THREADS_ENV: &str = "FLIPCONCEPT_THREADS";
pub const DIAGNOSE_HEADER: &str = "t,var_ef,var_ddim,adj_corr";

#[derive(Debug, Parser)]
#[command(name = "flipconcept", version, about = "Tuning-free multi-concept image blending")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic background, two concepts, masks and a config.
    MakeFixtures(CommonArgs),
    /// Invert every input image and check the reconstruction.
    Invert(CommonArgs),
    /// Blend the concepts into the background.
    Generate(CommonArgs),
    /// Per-step noise-map statistics, edit-friendly vs DDIM, as CSV.
    Diagnose(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Overlap { .. } => EXIT_OVERLAP,
            Error::Dimension(_) | Error::Parameter(_) | Error::EmptyMask | Error::Config(_) => {
                EXIT_CONFIG
            }
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: format!("config error: {}", msg.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserParams {
    pub seed: u64,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
}

impl Default for DenoiserParams {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
            embed_dim: DEFAULT_EMBED_DIM,
            n_blocks: DEFAULT_BLOCKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub image_path: PathBuf,
    #[serde(default)]
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    #[serde(default)]
    pub prompt: String,
}

fn default_factor() -> usize {
    1
}
fn default_alpha() -> f32 {
    crate::attention::DEFAULT_ALPHA
}
fn default_beta() -> f32 {
    crate::pipeline::DEFAULT_BETA
}
fn default_margin() -> usize {
    crate::mask::DEFAULT_BOX_MARGIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: ImageSize,
    #[serde(default = "default_factor")]
    pub latent_factor: usize,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default = "default_margin")]
    pub box_margin: usize,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_steps: Option<[usize; 2]>,
    #[serde(default)]
    pub denoiser: DenoiserParams,
    pub background: BackgroundSpec,
    #[serde(default)]
    pub concepts: Vec<ConceptSpec>,
    pub output_dir: PathBuf,
}

pub const MAX_STEPS: usize = 1000;
pub const MAX_ABS_ALPHA: f32 = 10.0;

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let ImageSize { h, w, c } = self.image_size;
        if h == 0 || w == 0 || !(c == 1 || c == 3) {
            return Err(config_err(format!("image_size {h}x{w}x{c}: need C in {{1, 3}}")));
        }
        let f = self.latent_factor;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(config_err(format!("latent_factor {f} must divide {h}x{w}")));
        }
        let p = self.denoiser.patch_size;
        if p == 0 || (h / f) % p != 0 || (w / f) % p != 0 {
            return Err(config_err(format!(
                "patch size {p} must divide the {}x{} latent",
                h / f,
                w / f
            )));
        }
        if !(1..=MAX_STEPS).contains(&self.schedule.steps) {
            return Err(config_err(format!("T must lie in 1..={MAX_STEPS}")));
        }
        if !self.alpha.is_finite() || self.alpha.abs() > MAX_ABS_ALPHA {
            return Err(config_err(format!("alpha must be finite with |alpha| <= {MAX_ABS_ALPHA}")));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(config_err("beta must lie in [0, 1]"));
        }
        NoiseSchedule::linear(self.schedule).map_err(|e| config_err(e.to_string()))?;
        self.blend_config(0).validate().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    pub fn blend_config(&self, threads: usize) -> BlendConfig {
        BlendConfig {
            alpha: self.alpha,
            beta: self.beta,
            schedule: self.schedule,
            seed: self.seed,
            box_margin: self.box_margin,
            stages: self.stages,
            guidance_steps: self.guidance_steps,
            threads,
        }
    }

    /// Background prompt followed by every concept prompt.
    pub fn composite_prompt(&self) -> String {
        std::iter::once(self.background.prompt.as_str())
            .chain(self.concepts.iter().map(|c| c.prompt.as_str()))
            .filter(|p| !p.trim().is_empty())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// A parsed config with every relative path resolved and inputs loaded.
pub struct Run {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    pub background: Field,
    pub concepts: Vec<ConceptInput>,
    pub denoiser: Denoiser,
    pub threads: usize,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_config(path: &Path) -> CliResult<RunConfig> {
    let bytes = fs::read(path).map_err(|e| CliError::from(Error::io(path, e)))?;
    serde_json::from_slice(&bytes).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn load_input_image(path: &Path, cfg: &RunConfig) -> CliResult<Field> {
    let ImageSize { h, w, c } = cfg.image_size;
    let is_ltf = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ltf"));
    if is_ltf {
        let f = read_ltf(path)?;
        if f.shape() != [h, w, c] {
            return Err(Error::format(path, format!("expected shape [{h}, {w}, {c}], got {:?}", f.shape())).into());
        }
        Ok(pool_field(&f, cfg.latent_factor)?)
    } else {
        let img = read_image(path)?;
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::format(
                path,
                format!("image is {}x{}x{}, config says {h}x{w}x{c}", img.height, img.width, img.channels),
            )
            .into());
        }
        Ok(encode_image(&img, cfg.latent_factor)?)
    }
}

impl Run {
    pub fn load(args: &CommonArgs) -> CliResult<Run> {
        let path = args
            .config
            .as_deref()
            .ok_or_else(|| config_err("--config is required"))?;
        let mut config = read_config(path)?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        config.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let output_dir = match &args.out {
            Some(out) => out.clone(),
            None => resolve(base, &config.output_dir),
        };
        let background = load_input_image(&resolve(base, &config.background.image_path), &config)?;
        let ImageSize { h, w, .. } = config.image_size;
        let concepts = config
            .concepts
            .iter()
            .map(|entry| {
                let image = load_input_image(&resolve(base, &entry.image_path), &config)?;
                let full = load_mask(&resolve(base, &entry.mask_path), Some((h, w)))?;
                Ok(ConceptInput {
                    image,
                    mask: downsample_mask(&full, config.latent_factor)?,
                    prompt: entry.prompt.clone(),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let dp = &config.denoiser;
        let denoiser = build_denoiser(dp.seed, dp.patch_size, dp.embed_dim, dp.n_blocks)
            .map_err(|e| config_err(e.to_string()))?;
        Ok(Run {
            config,
            output_dir,
            background,
            concepts,
            denoiser,
            threads: threads_from_env()?,
        })
    }

    fn ensure_output_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| Error::io(&self.output_dir, e).into())
    }

    fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.config.schedule)?)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json serializes");
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

pub fn cmd_make_fixtures(args: &CommonArgs) -> CliResult<String> {
    let size = match &args.config {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::from(Error::io(path, e)))?;
            let v: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            match v.get("image_size") {
                Some(s) => serde_json::from_value(s.clone())
                    .map_err(|e| config_err(format!("image_size: {e}")))?,
                None => ImageSize::default(),
            }
        }
        None => ImageSize::default(),
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("fixtures"));
    let seed = args.seed.unwrap_or(0);
    let fx = write_fixtures(&out, size, seed).map_err(|e| match e {
        Error::Parameter(m) => config_err(m),
        other => other.into(),
    })?;
    Ok(format!(
        "wrote fixtures to {} (seed {seed}, {}x{}x{}, mask pixels {} and {})\n",
        out.display(),
        size.h,
        size.w,
        size.c,
        fx.masks[0].count(),
        fx.masks[1].count()
    ))
}

pub fn cmd_invert(args: &CommonArgs) -> CliResult<String> {
    let run = Run::load(args)?;
    run.ensure_output_dir()?;
    let s = run.schedule()?;
    let d = &run.denoiser;
    let seed = run.config.seed;
    let mut inputs = vec![("background".to_string(), &run.background, run.config.background.prompt.clone())];
    for (i, c) in run.concepts.iter().enumerate() {
        inputs.push((format!("concept_{}", i + 1), &c.image, c.prompt.clone()));
    }
    let tracks_dir = run.output_dir.join("tracks");
    let mut images = Vec::new();
    let mut worst = 0.0f32;
    // Stream numbering matches the blend pipeline: 0 background, i + 1 concepts.
    for (stream, (name, image, prompt)) in inputs.into_iter().enumerate() {
        let cond = d.embed(&prompt);
        let mut rng = Rng::new(Rng::derive_seed(seed, stream as u64));
        let track = invert(image, d, &cond, &s, &mut rng)?;
        let recon = replay(&track, d, &cond, &s, None)?;
        let err = image.max_abs_diff(&recon)?;
        worst = worst.max(err);
        save_track(&tracks_dir.join(&name), &track)?;
        images.push(serde_json::json!({"name": name, "max_abs_err": err}));
    }
    let report = serde_json::json!({
        "max_abs_err": worst,
        "T": s.steps(),
        "seed": seed,
        "images": images,
    });
    write_json(&run.output_dir.join("invert_report.json"), &report)?;
    let text = serde_json::to_string_pretty(&report).expect("json serializes") + "\n";
    if worst.is_finite() && worst < RECONSTRUCTION_TOLERANCE {
        Ok(text)
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!(
                "reconstruction error {worst} exceeds {RECONSTRUCTION_TOLERANCE}\n{text}"
            ),
        })
    }
}

pub fn cmd_generate(args: &CommonArgs) -> CliResult<String> {
    let run = Run::load(args)?;
    run.ensure_output_dir()?;
    let cfg = run.config.blend_config(run.threads);
    let out = generate(
        &run.background,
        &run.config.background.prompt,
        &run.concepts,
        &cfg,
        &run.denoiser,
    )?;
    let image = decode(&out.latent)?;
    let file_name = format!("out.{}", run.config.image_size.extension());
    write_image(&run.output_dir.join(&file_name), &image)?;
    write_ltf(&run.output_dir.join("out.ltf"), &out.latent)?;
    let manifest = serde_json::json!({
        "config": run.config,
        "composite_prompt": run.config.composite_prompt(),
        "output": file_name,
        "latent_shape": out.latent.shape(),
        "counters": out.counters,
        "timing": {
            "per_step_ms": out.step_ms,
            "total_ms": out.step_ms.iter().sum::<f64>(),
        },
    });
    write_json(&run.output_dir.join("manifest.json"), &manifest)?;
    Ok(format!(
        "wrote {} ({} concepts, {} steps)\n",
        run.output_dir.join(&file_name).display(),
        run.concepts.len(),
        out.step_ms.len()
    ))
}

pub fn cmd_diagnose(args: &CommonArgs) -> CliResult<String> {
    let run = Run::load(args)?;
    run.ensure_output_dir()?;
    let s = run.schedule()?;
    if s.steps() < 3 {
        return Err(config_err("diagnose needs T >= 3"));
    }
    let d = &run.denoiser;
    let cond = d.embed(&run.config.background.prompt);
    let mut rng = Rng::new(Rng::derive_seed(run.config.seed, 0));
    let ef = NoiseStats::of(&invert(&run.background, d, &cond, &s, &mut rng)?);
    let ddim = NoiseStats::of(&ddim_invert(&run.background, d, &cond, &s)?.track);

    let mut csv = String::from(DIAGNOSE_HEADER);
    csv.push('\n');
    for (i, &(t, var_ef)) in ef.variance.iter().enumerate() {
        let var_ddim = ddim.variance[i].1;
        let corr = ef
            .adjacent_corr
            .get(i)
            .map(|c| format!("{:.6}", c.1))
            .unwrap_or_default();
        writeln!(csv, "{t},{var_ef:.6},{var_ddim:.6},{corr}").expect("string write");
    }
    writeln!(
        csv,
        "mean,{:.6},{:.6},{:.6}",
        ef.mean_variance(),
        ddim.mean_variance(),
        ef.mean_adjacent_corr()
    )
    .expect("string write");
    write_atomic(&run.output_dir.join("diagnose.csv"), csv.as_bytes())?;
    Ok(csv)
}

/// Runs one parsed command and returns its stdout text.
pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::MakeFixtures(a) => cmd_make_fixtures(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}
