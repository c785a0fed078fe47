//! Loading scene inputs and checkpoints.

use std::path::{Path, PathBuf};

use dsr_core::denoiser::{Denoiser, DenoiserConfig};
use dsr_core::gridio::{read_grid, GridField};
use dsr_core::prep::{build_conditioning, ConditioningStack, NormStats};
use dsr_core::tensornet::{read_checkpoint, write_checkpoint, AdamW, Tensor};
use ndarray::{s, Array2};

use crate::error::{rt, CliError};

pub fn grid(path: &Path) -> Result<GridField, CliError> {
    read_grid(path).map_err(rt(path.display()))
}

/// Single-frame, single-variable elevation grid.
pub fn dem(path: &Path) -> Result<(GridField, Array2<f32>), CliError> {
    let g = grid(path)?;
    if g.n_var() != 1 || g.n_time() != 1 {
        return Err(CliError::Runtime(format!(
            "{}: DEM must hold one variable and one frame, found {} and {}",
            path.display(),
            g.n_var(),
            g.n_time()
        )));
    }
    let plane = g.data().slice(s![0, 0, .., ..]).to_owned();
    Ok((g, plane))
}

pub fn stats(path: &Path) -> Result<NormStats, CliError> {
    NormStats::read(path).map_err(rt(path.display()))
}

pub fn conditioning(
    coarse: &GridField,
    dem_grid: &GridField,
    dem: &Array2<f32>,
    times: &[i64],
    stats: &NormStats,
) -> Result<ConditioningStack, CliError> {
    build_conditioning(coarse, dem.view(), &dem_grid.geometry(), times, stats).map_err(rt("conditioning"))
}

pub fn preset(name: &str) -> Result<DenoiserConfig, CliError> {
    DenoiserConfig::preset(name).ok_or_else(|| CliError::Usage(format!("unknown preset `{name}` (desk, full)")))
}

pub fn load_model(path: &Path, config: &DenoiserConfig) -> Result<Denoiser<f32>, CliError> {
    let mut d = Denoiser::<f32>::build(config, 0).map_err(rt("model"))?;
    let entries = read_checkpoint(path).map_err(rt(path.display()))?;
    d.params.load_from(&entries).map_err(rt(path.display()))?;
    Ok(d)
}

pub fn save_model(path: &Path, d: &Denoiser<f32>) -> Result<(), CliError> {
    write_checkpoint(path, &d.params.to_entries()).map_err(rt(path.display()))
}

/// Companion file holding optimizer state next to a checkpoint.
pub fn state_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}.state.ckpt"))
}

/// Optimizer moments, step counter and a free scalar (best validation loss).
pub fn save_state(path: &Path, d: &Denoiser<f32>, opt: &AdamW<f32>, extra: f64) -> Result<(), CliError> {
    let (m, v) = opt.moments();
    let mut entries = vec![
        ("step".to_string(), Tensor::new(&[1], vec![opt.steps_taken() as f32]).expect("scalar")),
        ("extra".to_string(), Tensor::new(&[1], vec![extra as f32]).expect("scalar")),
    ];
    for (i, p) in d.params.iter().enumerate() {
        if let (Some(m), Some(v)) = (m.get(i), v.get(i)) {
            entries.push((format!("m.{}", p.name), Tensor::new(&[m.len()], m.clone()).expect("flat")));
            entries.push((format!("v.{}", p.name), Tensor::new(&[v.len()], v.clone()).expect("flat")));
        }
    }
    write_checkpoint(path, &entries).map_err(rt(path.display()))
}

/// Restores optimizer state; returns (step, extra).
pub fn load_state(path: &Path, d: &Denoiser<f32>, opt: &mut AdamW<f32>) -> Result<(u64, f64), CliError> {
    let entries = read_checkpoint(path).map_err(rt(path.display()))?;
    let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let bad = |what: &str| CliError::Runtime(format!("{}: {what}", path.display()));
    let step = find("step").ok_or_else(|| bad("missing step"))?.data()[0] as u64;
    let extra = find("extra").ok_or_else(|| bad("missing extra"))?.data()[0] as f64;
    let mut m = Vec::new();
    let mut v = Vec::new();
    if step > 0 {
        for p in d.params.iter() {
            m.push(find(&format!("m.{}", p.name)).ok_or_else(|| bad(&format!("missing moments for {}", p.name)))?.data().to_vec());
            v.push(find(&format!("v.{}", p.name)).ok_or_else(|| bad(&format!("missing moments for {}", p.name)))?.data().to_vec());
        }
    }
    opt.restore(step, m, v).map_err(rt(path.display()))?;
    Ok((step, extra))
}

/// Hours from the forecast initialization to frame `i` (first frame at one step).
pub fn lead_hours(g: &GridField, i: usize) -> Result<u32, CliError> {
    if g.dt() % 3600 != 0 {
        return Err(CliError::Runtime(format!("time step {} s is not a whole number of hours", g.dt())));
    }
    Ok((i as u32 + 1) * (g.dt() / 3600))
}
