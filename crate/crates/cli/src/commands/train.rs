use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use dsr_core::denoiser::Denoiser;
use dsr_core::diffusion::{
    eval_loss, train_step, ConsistencyParam, DistillConfig, Distiller, NoiseSchedule, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_TIMESTEPS,
};
use dsr_core::gridio::GridField;
use dsr_core::prep::{fit_scene_stats, normalize_field, to_tensor, ConditioningStack};
use dsr_core::tensornet::{AdamW, Tensor};
use dsr_core::tiling::{sample_training_patch, DEFAULT_PATCH};
use dsr_core::derive_seed;
use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunDir, Settings};
use crate::data;
use crate::error::{rt, CliError};
use crate::Common;

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_DISTILL: u64 = 3;

/// Scene inputs shared by `train` and `distill`.
#[derive(Args)]
pub struct SceneArgs {
    /// Fine-grid target GRD1.
    #[arg(long)]
    fine: Option<PathBuf>,
    /// Coarse conditioning GRD1 (17 variables).
    #[arg(long)]
    coarse: Option<PathBuf>,
    /// Elevation GRD1 on the fine grid.
    #[arg(long)]
    dem: Option<PathBuf>,
    /// Model size preset: desk or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Square patch side in pixels.
    #[arg(long)]
    patch: Option<usize>,
    /// Frames per training sample; 0 uses every training frame.
    #[arg(long)]
    window: Option<usize>,
    /// Trailing fraction of frames held out from training.
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Checkpoint to continue from; its `.state.ckpt` companion must exist.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scene: SceneArgs,
    /// Steps between validation passes.
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    val_patches: Option<usize>,
}

#[derive(Args)]
pub struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scene: SceneArgs,
    /// Trained teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Normalization sidecar of the teacher run.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Timestep gap between student and target evaluations.
    #[arg(long)]
    skip: Option<usize>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    timestep_scale: Option<f64>,
    #[arg(long)]
    sigma_data: Option<f64>,
}

struct Scene {
    x: Array4<f32>,
    cond: ConditioningStack,
    n_train: usize,
    fine: GridField,
}

struct RunSettings {
    preset: String,
    steps: usize,
    lr: f64,
    weight_decay: f64,
    patch: usize,
    window: usize,
    val_fraction: f64,
    seed: u64,
    schedule: NoiseSchedule,
    resume: Option<PathBuf>,
    fine: PathBuf,
    coarse: PathBuf,
    dem: PathBuf,
}

fn scene_settings(s: &mut Settings, a: SceneArgs, default_steps: usize) -> Result<RunSettings, CliError> {
    let fine = s.require("fine", a.fine)?;
    let coarse = s.require("coarse", a.coarse)?;
    let dem = s.require("dem", a.dem)?;
    let preset = s.get("preset", a.preset, "desk".to_string())?;
    let steps = s.get("steps", a.steps, default_steps)?;
    let lr = s.get("lr", a.lr, 1e-4)?;
    let weight_decay = s.get("weight_decay", a.weight_decay, 1e-2)?;
    let patch = s.get("patch", a.patch, DEFAULT_PATCH)?;
    let window = s.get("window", a.window, 0usize)?;
    let val_fraction = s.get("val_fraction", a.val_fraction, 0.2)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let b0 = s.get("beta_start", a.beta_start, DEFAULT_BETA_START)?;
    let b1 = s.get("beta_end", a.beta_end, DEFAULT_BETA_END)?;
    let resume = s.optional("resume", a.resume)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CliError::Usage(format!("val_fraction {val_fraction} must be in [0, 1)")));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(CliError::Usage(format!("lr {lr} must be positive")));
    }
    let schedule = NoiseSchedule::new(DEFAULT_TIMESTEPS, b0, b1).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(RunSettings { preset, steps, lr, weight_decay, patch, window, val_fraction, seed, schedule, resume, fine, coarse, dem })
}

fn load_scene(
    s: &mut Settings,
    c: &RunSettings,
    stats: Option<&Path>,
) -> Result<(Scene, dsr_core::prep::NormStats), CliError> {
    s.input_digest("fine", &c.fine)?;
    s.input_digest("coarse", &c.coarse)?;
    s.input_digest("dem", &c.dem)?;
    let fine = data::grid(&c.fine)?;
    let coarse = data::grid(&c.coarse)?;
    let (dem_grid, dem) = data::dem(&c.dem)?;
    if dem_grid.geometry() != fine.geometry() {
        return Err(CliError::Runtime("DEM and fine grids differ in geometry".into()));
    }
    let t = fine.n_time();
    let n_val = if c.val_fraction > 0.0 { ((t as f64 * c.val_fraction).round() as usize).max(1) } else { 0 };
    if n_val >= t {
        return Err(CliError::Usage(format!("{t} frames leave nothing to train on after holding out {n_val}")));
    }
    let n_train = t - n_val;
    let stats = match stats {
        Some(p) => {
            s.input_digest("stats", p)?;
            data::stats(p)?
        }
        None => fit_scene_stats(&fine, &coarse, dem.view(), 0..n_train).map_err(rt("statistics"))?,
    };
    let x = normalize_field(&fine, &stats).map_err(rt("normalization"))?;
    let times: Vec<i64> = (0..t).map(|i| fine.time_of(i)).collect();
    let cond = data::conditioning(&coarse, &dem_grid, &dem, &times, &stats)?;
    Ok((Scene { x, cond, n_train, fine }, stats))
}

fn check_patch(d: &Denoiser<f32>, scene: &Scene, patch: usize) -> Result<(), CliError> {
    let m = d.config().spatial_multiple();
    if patch == 0 || patch % m != 0 {
        return Err(CliError::Usage(format!("patch {patch} must be a positive multiple of {m}")));
    }
    let (h, w) = (scene.fine.height(), scene.fine.width());
    if h < patch || w < patch {
        return Err(CliError::Usage(format!("patch {patch} does not fit the {h}x{w} domain")));
    }
    Ok(())
}

/// Random spatial patch over a frame window of `frames`.
fn draw<R: Rng>(scene: &Scene, frames: std::ops::Range<usize>, window: usize, patch: usize, rng: &mut R) -> Result<(Tensor<f32>, Tensor<f32>), CliError> {
    let span = frames.len();
    let len = if window == 0 || window >= span { span } else { window };
    let start = frames.start + if len < span { rng.gen_range(0..=span - len) } else { 0 };
    let x = scene.x.slice(s![.., start..start + len, .., ..]);
    let cond = ConditioningStack {
        data: scene.cond.data.slice(s![.., start..start + len, .., ..]).to_owned(),
        names: scene.cond.names.clone(),
    };
    let (xp, cp, _) = sample_training_patch(x, &cond, patch, rng).map_err(rt("patch"))?;
    Ok((to_tensor(&xp), to_tensor(&cp.data)))
}

struct ValSet {
    items: Vec<(Tensor<f32>, Tensor<f32>, usize, Tensor<f32>)>,
}

impl ValSet {
    fn build(scene: &Scene, patch: usize, n: usize, seed: u64, s: &NoiseSchedule) -> Result<Self, CliError> {
        let t = scene.x.dim().1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_VAL, 0));
        let mut items = Vec::with_capacity(n);
        if scene.n_train < t {
            for _ in 0..n {
                let (x, c) = draw(scene, scene.n_train..t, 0, patch, &mut rng)?;
                let k = rng.gen_range(0..s.len());
                let eps = Tensor::randn(x.shape(), &mut rng);
                items.push((x, c, k, eps));
            }
        }
        Ok(Self { items })
    }

    fn loss(&self, d: &Denoiser<f32>, s: &NoiseSchedule) -> Result<Option<f64>, CliError> {
        if self.items.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for (x, c, k, eps) in &self.items {
            total += eval_loss(d, x, c, *k, eps, s).map_err(rt("validation"))?;
        }
        Ok(Some(total / self.items.len() as f64))
    }
}

pub fn train(a: TrainArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("train", a.common.config.as_deref())?;
    let c = scene_settings(&mut s, a.scene, 2000)?;
    let val_every = s.get("val_every", a.val_every, 100usize)?.max(1);
    let val_patches = s.get("val_patches", a.val_patches, 32usize)?;
    let config = data::preset(&c.preset)?;
    s.finish()?;

    let (scene, stats) = load_scene(&mut s, &c, None)?;
    let mut d = Denoiser::<f32>::build(&config, c.seed).map_err(rt("model"))?;
    let mut opt = AdamW::new(c.lr, c.weight_decay);
    let mut best = f64::INFINITY;
    let mut start = 0u64;
    if let Some(r) = &c.resume {
        s.input_digest("resume", r)?;
        d = data::load_model(r, &config)?;
        (start, best) = data::load_state(&data::state_path(r), &d, &mut opt)?;
    }
    check_patch(&d, &scene, c.patch)?;
    let val = ValSet::build(&scene, c.patch, val_patches, c.seed, &c.schedule)?;

    let mut run = RunDir::create(&a.common.runs_dir)?;
    run.write("stats.csv", stats.to_csv())?;
    let mut loss_csv = String::from("step,loss\n");
    let mut val_csv = String::from("step,val_loss\n");
    let save_last = |run: &mut RunDir, d: &Denoiser<f32>, opt: &AdamW<f32>, best: f64| -> Result<(), CliError> {
        data::save_model(&run.file("last.ckpt"), d)?;
        data::save_state(&run.file("last.state.ckpt"), d, opt, best)?;
        run.record("last.ckpt");
        run.record("last.state.ckpt");
        Ok(())
    };
    for step in start + 1..=c.steps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, STREAM_TRAIN, step));
        let (x, cond) = draw(&scene, 0..scene.n_train, c.window, c.patch, &mut rng)?;
        let loss = match train_step(&mut d, &mut opt, &x, &cond, &c.schedule, &mut rng) {
            Ok(l) => l,
            Err(e) => {
                run.write("loss.csv", &loss_csv)?;
                run.write("val.csv", &val_csv)?;
                save_last(&mut run, &d, &opt, best)?;
                run.finish(&s)?;
                return Err(CliError::Runtime(format!("step {step}: {e}")));
            }
        };
        let _ = writeln!(loss_csv, "{step},{loss}");
        if step % val_every as u64 == 0 || step == c.steps as u64 {
            let v = val.loss(&d, &c.schedule)?.unwrap_or(loss);
            let _ = writeln!(val_csv, "{step},{v}");
            if v < best {
                best = v;
                data::save_model(&run.file("best.ckpt"), &d)?;
                run.record("best.ckpt");
            }
            save_last(&mut run, &d, &opt, best)?;
            eprintln!("step {step} loss {loss:.5} val {v:.5} best {best:.5}");
        }
    }
    run.write("loss.csv", &loss_csv)?;
    run.write("val.csv", &val_csv)?;
    if !run.file("last.ckpt").exists() {
        save_last(&mut run, &d, &opt, best)?;
    }
    run.finish(&s)
}

pub fn distill(a: DistillArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("distill", a.common.config.as_deref())?;
    let teacher_path: PathBuf = s.require("teacher", a.teacher)?;
    let stats_path = s.optional("stats", a.stats)?;
    let c = scene_settings(&mut s, a.scene, 1000)?;
    let d = DistillConfig::default();
    let cfg = DistillConfig {
        skip: s.get("skip", a.skip, d.skip)?,
        ema_decay: s.get("ema_decay", a.ema_decay, d.ema_decay)?,
        lr: c.lr,
        weight_decay: c.weight_decay,
        param: ConsistencyParam {
            timestep_scale: s.get("timestep_scale", a.timestep_scale, d.param.timestep_scale)?,
            sigma_data: s.get("sigma_data", a.sigma_data, d.param.sigma_data)?,
        },
    };
    let config = data::preset(&c.preset)?;
    s.finish()?;
    if !teacher_path.is_file() {
        return Err(CliError::Usage(format!("teacher checkpoint {} does not exist", teacher_path.display())));
    }
    let stats_path = stats_path.unwrap_or_else(|| teacher_path.with_file_name("stats.csv"));
    s.input_digest("teacher", &teacher_path)?;
    let teacher = data::load_model(&teacher_path, &config)?;
    let (scene, stats) = load_scene(&mut s, &c, Some(&stats_path))?;
    check_patch(&teacher, &scene, c.patch)?;

    let mut dist = Distiller::new(&teacher, cfg, &c.schedule).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut start = 0;
    if let Some(r) = &c.resume {
        s.input_digest("resume", r)?;
        dist.student = data::load_model(r, &config)?;
        dist.target = data::load_model(&r.with_file_name("target.ckpt"), &config)?;
        (start, _) = data::load_state(&data::state_path(r), &dist.student, &mut dist.opt)?;
    }

    let mut run = RunDir::create(&a.common.runs_dir)?;
    run.write("stats.csv", stats.to_csv())?;
    let mut loss_csv = String::from("step,loss\n");
    let save = |run: &mut RunDir, dist: &Distiller<f32>| -> Result<(), CliError> {
        data::save_model(&run.file("student.ckpt"), &dist.student)?;
        data::save_model(&run.file("target.ckpt"), &dist.target)?;
        data::save_state(&run.file("student.state.ckpt"), &dist.student, &dist.opt, 0.0)?;
        for f in ["student.ckpt", "target.ckpt", "student.state.ckpt"] {
            run.record(f);
        }
        Ok(())
    };
    for step in start + 1..=c.steps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, STREAM_DISTILL, step));
        let (x, cond) = draw(&scene, 0..scene.n_train, c.window, c.patch, &mut rng)?;
        let loss = match dist.step(&teacher, &x, &cond, &c.schedule, &mut rng) {
            Ok(l) => l,
            Err(e) => {
                run.write("loss.csv", &loss_csv)?;
                save(&mut run, &dist)?;
                run.finish(&s)?;
                return Err(CliError::Runtime(format!("step {step}: {e}")));
            }
        };
        let _ = writeln!(loss_csv, "{step},{loss}");
        if step % 100 == 0 {
            eprintln!("step {step} loss {loss:.6}");
        }
    }
    run.write("loss.csv", &loss_csv)?;
    save(&mut run, &dist)?;
    run.finish(&s)
}
