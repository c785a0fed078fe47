use std::path::PathBuf;

use clap::Args;
use dsr_core::diffusion::{sample, ConsistencyParam, NoiseSchedule, SamplerConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
use dsr_core::gridio::{write_grid, GridField};
use dsr_core::prep::{denormalize_field, from_tensor, to_tensor};
use dsr_core::tiling::{plan_tiles, run_tiled, DEFAULT_STRIDE, DEFAULT_TILE};
use dsr_core::TARGET_VARIABLES;

use crate::config::{RunDir, Settings};
use crate::data;
use crate::error::{rt, CliError};
use crate::Common;

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint (teacher or distilled student).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Normalization sidecar; defaults to `stats.csv` beside the checkpoint.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    coarse: Option<PathBuf>,
    /// Elevation GRD1; its grid defines the output grid.
    #[arg(long)]
    dem: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Sampler steps: 4, 8, 25 or 50.
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Output frames; defaults to hourly frames spanning the coarse input.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    timestep_scale: Option<f64>,
    #[arg(long)]
    sigma_data: Option<f64>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

pub fn infer(a: InferArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("infer", a.common.config.as_deref())?;
    let ckpt: PathBuf = s.require("checkpoint", a.checkpoint)?;
    let stats_path = s.optional("stats", a.stats)?.unwrap_or_else(|| ckpt.with_file_name("stats.csv"));
    let coarse_path: PathBuf = s.require("coarse", a.coarse)?;
    let dem_path: PathBuf = s.require("dem", a.dem)?;
    let preset = s.get("preset", a.preset, "desk".to_string())?;
    let n_steps = s.get("n_steps", a.n_steps, 25usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let tile = s.get("tile", a.tile, DEFAULT_TILE)?;
    let stride = s.get("stride", a.stride, DEFAULT_STRIDE)?;
    let frames = s.optional("frames", a.frames)?;
    let dp = ConsistencyParam::default();
    let cp = ConsistencyParam {
        timestep_scale: s.get("timestep_scale", a.timestep_scale, dp.timestep_scale)?,
        sigma_data: s.get("sigma_data", a.sigma_data, dp.sigma_data)?,
    };
    let b0 = s.get("beta_start", a.beta_start, DEFAULT_BETA_START)?;
    let b1 = s.get("beta_end", a.beta_end, DEFAULT_BETA_END)?;
    let config = data::preset(&preset)?;
    s.finish()?;
    let sampler = SamplerConfig::new(n_steps, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let schedule = NoiseSchedule::new(DEFAULT_TIMESTEPS, b0, b1).map_err(|e| CliError::Usage(e.to_string()))?;
    let m = config.spatial_multiple();
    if tile % m != 0 {
        return Err(CliError::Usage(format!("tile {tile} must be a multiple of {m}")));
    }

    s.input_digest("checkpoint", &ckpt)?;
    s.input_digest("stats", &stats_path)?;
    s.input_digest("coarse", &coarse_path)?;
    s.input_digest("dem", &dem_path)?;
    let model = data::load_model(&ckpt, &config)?;
    let stats = data::stats(&stats_path)?;
    let coarse = data::grid(&coarse_path)?;
    let (dem_grid, dem) = data::dem(&dem_path)?;

    let span = coarse.time_of(coarse.n_time() - 1) - coarse.t0();
    let t_out = match frames {
        Some(n) => n,
        None => {
            if span % 3600 != 0 {
                return Err(CliError::Runtime(format!("coarse span of {span} s is not whole hours")));
            }
            (span / 3600) as usize + 1
        }
    };
    if t_out < 2 {
        return Err(CliError::Usage(format!("need at least 2 output frames, got {t_out}")));
    }
    if span % (t_out as i64 - 1) != 0 {
        return Err(CliError::Usage(format!("{t_out} frames do not evenly divide the {span} s coarse span")));
    }
    let dt = span / (t_out as i64 - 1);
    let times: Vec<i64> = (0..t_out).map(|i| coarse.t0() + i as i64 * dt).collect();
    let cond = data::conditioning(&coarse, &dem_grid, &dem, &times, &stats)?;
    let layout = plan_tiles(dem_grid.height(), dem_grid.width(), tile, stride).map_err(rt("tiling"))?;

    let pred = run_tiled(
        |c, tile_seed| {
            let cfg = SamplerConfig { n_steps: sampler.n_steps, seed: tile_seed };
            let y = sample(&model, &to_tensor(&c.data), &cfg, &cp, &schedule).map_err(|e| e.to_string())?;
            from_tensor(&y).map_err(|e| e.to_string())
        },
        &cond,
        &layout,
        seed,
    )
    .map_err(rt("inference"))?;
    let physical = denormalize_field(&pred, &TARGET_VARIABLES, &stats).map_err(rt("denormalization"))?;
    let g = dem_grid.geometry();
    let out = GridField::new(
        TARGET_VARIABLES.iter().map(|v| v.to_string()).collect(),
        physical,
        g.lat0,
        g.lon0,
        g.dlat,
        g.dlon,
        times[0],
        dt as u32,
    )
    .map_err(rt("forecast"))?;

    let mut run = RunDir::create(&a.common.runs_dir)?;
    write_grid(&out, run.file("forecast.grd")).map_err(rt("forecast.grd"))?;
    run.record("forecast.grd");
    run.write("layout.txt", layout.describe())?;
    run.finish(&s)
}
