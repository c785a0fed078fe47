//! Synthetic coarse/fine scene pairs with power-law spectra, terrain coupling
//! and block-mean coarsening.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, Array4, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::gridio::{GridError, GridField, StationRecord};
use crate::TARGET_VARIABLES;

/// Coarse-only auxiliary variables appended after the seven targets.
pub const AUX_VARIABLES: [&str; 10] = ["Z500", "T850", "Q850", "U850", "V850", "MSLP", "TCWV", "U10", "V10", "T2M"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameter `{field}`: {msg}")]
    Param { field: &'static str, msg: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn param(field: &'static str, msg: impl Into<String>) -> SynthError {
    SynthError::Param { field, msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Fine frames; the coarse grid keeps every `time_stride`-th frame.
    pub frames: usize,
    /// Power-law exponent of each target's spectrum, in target order.
    pub slopes: [f64; 7],
    /// Weight of the terrain term in every field.
    pub topo_strength: f64,
    pub coarsen: usize,
    pub time_stride: usize,
    /// Standard deviation of the per-mode phase drift, radians per frame.
    pub phase_drift: f64,
    pub seed: u64,
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub t0: i64,
    pub dt: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 67,
            slopes: [-3.0; 7],
            topo_strength: 1.0,
            coarsen: 8,
            time_stride: 6,
            phase_drift: 0.1,
            seed: 0,
            lat0: 39.0,
            lon0: -106.0,
            dlat: 0.01,
            dlon: 0.01,
            t0: 1_672_574_400,
            dt: 3600,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height == 0 || self.width == 0 {
            return Err(param("height", "domain must be non-empty"));
        }
        if self.coarsen == 0 || self.height % self.coarsen != 0 || self.width % self.coarsen != 0 {
            return Err(param(
                "coarsen",
                format!("{} must divide both {} and {}", self.coarsen, self.height, self.width),
            ));
        }
        if self.frames == 0 {
            return Err(param("frames", "need at least one frame"));
        }
        if self.time_stride == 0 || (self.frames - 1) % self.time_stride != 0 {
            return Err(param(
                "time_stride",
                format!("{} must divide frames - 1 = {}", self.time_stride, self.frames - 1),
            ));
        }
        if let Some(s) = self.slopes.iter().find(|s| !(s.is_finite() && **s < 0.0)) {
            return Err(param("slopes", format!("spectral slope {s} must be negative")));
        }
        if !self.topo_strength.is_finite() || self.topo_strength < 0.0 {
            return Err(param("topo_strength", "must be finite and non-negative"));
        }
        if !self.phase_drift.is_finite() || self.phase_drift < 0.0 {
            return Err(param("phase_drift", "must be finite and non-negative"));
        }
        if self.dt == 0 {
            return Err(param("dt", "must be positive"));
        }
        Ok(())
    }
}

/// Fine targets, their coarse counterpart (17 variables) and the fine DEM.
#[derive(Clone, Debug)]
pub struct Scene {
    pub fine: GridField,
    pub coarse: GridField,
    pub dem: Array2<f32>,
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Unit-variance Gaussian random field sequence `[T][H][W]` with isotropic
/// power spectrum ∝ k^slope whose Fourier phases drift frame to frame.
pub fn power_law_field<R: Rng + ?Sized>(h: usize, w: usize, t: usize, slope: f64, drift: f64, rng: &mut R) -> Array3<f64> {
    let n = h.min(w) as f64;
    let mut amp = vec![0.0; h * w];
    let mut phase = vec![0.0; h * w];
    let mut rate = vec![0.0; h * w];
    for i in 0..h {
        let ky = signed_freq(i, h) * n / h as f64;
        for j in 0..w {
            let kx = signed_freq(j, w) * n / w as f64;
            let k = (ky * ky + kx * kx).sqrt();
            let idx = i * w + j;
            let g: f64 = StandardNormal.sample(rng);
            amp[idx] = if k > 0.0 { k.powf(slope / 2.0) * g.abs() } else { 0.0 };
            phase[idx] = rng.gen_range(0.0..2.0 * PI);
            let d: f64 = StandardNormal.sample(rng);
            rate[idx] = drift * d;
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft_inverse(w);
    let col = planner.plan_fft_inverse(h);
    let mut out = Array3::<f64>::zeros((t, h, w));
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for f in 0..t {
        for idx in 0..h * w {
            buf[idx] = Complex::from_polar(amp[idx], phase[idx] + rate[idx] * f as f64);
        }
        row.process(&mut buf);
        for j in 0..w {
            for i in 0..h {
                tmp[i] = buf[i * w + j];
            }
            col.process(&mut tmp);
            for i in 0..h {
                out[[f, i, j]] = tmp[i].re;
            }
        }
    }
    let len = out.len() as f64;
    let mean = out.sum() / len;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt();
    if sd > 0.0 {
        out.mapv_inplace(|v| (v - mean) / sd);
    }
    out
}

/// Sum of smooth Gaussian bumps, in metres.
pub fn synthetic_dem<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Array2<f64> {
    let n_bumps = 6;
    let scale = h.min(w) as f64;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(scale / 12.0..scale / 5.0),
                rng.gen_range(200.0..1500.0),
            )
        })
        .collect();
    Array2::from_shape_fn((h, w), |(i, j)| {
        bumps
            .iter()
            .map(|&(ci, cj, sd, amp)| {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                amp * (-d2 / (2.0 * sd * sd)).exp()
            })
            .sum()
    })
}

/// Mean over non-overlapping `f x f` blocks.
pub fn block_mean(x: ArrayView2<'_, f32>, f: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h / f, w / f), |(i, j)| {
        let b = x.slice(s![i * f..(i + 1) * f, j * f..(j + 1) * f]);
        (b.iter().map(|&v| v as f64).sum::<f64>() / (f * f) as f64) as f32
    })
}

/// Maps a unit field plus terrain onto a variable's physical range.
fn physical(name: &str, g: f64, dem_m: f64, dem_n: f64, topo: f64) -> f64 {
    match name {
        "APCP" => ((1.2 * g + 0.8 * topo * dem_n).exp() - 1.5).max(0.0),
        "TMP" => 281.0 + 4.0 * g - topo * 0.0065 * dem_m,
        "SPFH" => (0.006 + 0.0015 * g - topo * 1.0e-6 * dem_m).max(1.0e-5),
        "UGRD" => 3.0 + 3.0 * g + topo * 2.0 * dem_n,
        "VGRD" => -1.0 + 3.0 * g - topo * 1.5 * dem_n,
        "PRES" => 101_325.0 * (-topo * dem_m / 8_000.0).exp() + 250.0 * g,
        "DLWRF" => 310.0 + 25.0 * g - topo * 0.02 * dem_m,
        _ => g + topo * dem_n,
    }
}

/// Generates one scene from `spec`.
pub fn gen_scene(spec: &SynthSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let (h, w, t, f) = (spec.height, spec.width, spec.frames, spec.coarsen);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dem = synthetic_dem(h, w, &mut rng);
    let dem_max = dem.iter().cloned().fold(0.0, f64::max).max(1.0);

    let mut fine = Array4::<f32>::zeros((TARGET_VARIABLES.len(), t, h, w));
    let mut units = Vec::with_capacity(TARGET_VARIABLES.len());
    for (v, name) in TARGET_VARIABLES.iter().enumerate() {
        let g = power_law_field(h, w, t, spec.slopes[v], spec.phase_drift, &mut rng);
        for ((fr, i, j), val) in g.indexed_iter() {
            let d = dem[[i, j]];
            fine[[v, fr, i, j]] = physical(name, *val, d, d / dem_max, spec.topo_strength) as f32;
        }
        units.push(g);
    }

    let n_cond = TARGET_VARIABLES.len() + AUX_VARIABLES.len();
    let tc = (t - 1) / spec.time_stride + 1;
    let mut coarse = Array4::<f32>::zeros((n_cond, tc, h / f, w / f));
    for v in 0..TARGET_VARIABLES.len() {
        for c in 0..tc {
            let plane = fine.slice(s![v, c * spec.time_stride, .., ..]);
            coarse.slice_mut(s![v, c, .., ..]).assign(&block_mean(plane, f));
        }
    }
    for (a, name) in AUX_VARIABLES.iter().enumerate() {
        let noise = power_law_field(h, w, t, -3.0, spec.phase_drift, &mut rng);
        let base = &units[a % units.len()];
        for c in 0..tc {
            let fr = c * spec.time_stride;
            let plane = Array2::from_shape_fn((h, w), |(i, j)| {
                let d = dem[[i, j]];
                let g = 0.7 * base[[fr, i, j]] + 0.3 * noise[[fr, i, j]];
                physical(name, g, d, d / dem_max, spec.topo_strength) as f32
            });
            coarse
                .slice_mut(s![TARGET_VARIABLES.len() + a, c, .., ..])
                .assign(&block_mean(plane.view(), f));
        }
    }

    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let fine = GridField::new(names(&TARGET_VARIABLES), fine, spec.lat0, spec.lon0, spec.dlat, spec.dlon, spec.t0, spec.dt)?;
    let mut cond_names = names(&TARGET_VARIABLES);
    cond_names.extend(names(&AUX_VARIABLES));
    let off = (f as f64 - 1.0) / 2.0;
    let coarse = GridField::new(
        cond_names,
        coarse,
        spec.lat0 + off * spec.dlat,
        spec.lon0 + off * spec.dlon,
        spec.dlat * f as f64,
        spec.dlon * f as f64,
        spec.t0,
        spec.dt * spec.time_stride as u32,
    )?;
    Ok(Scene { fine, coarse, dem: dem.mapv(|v| v as f32) })
}

/// `n` stations at distinct random cell centres observing `var` at every
/// frame, with additive Gaussian noise of standard deviation `noise_sd`.
pub fn gen_station_set<R: Rng + ?Sized>(
    fine: &GridField,
    var: &str,
    n: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Vec<StationRecord>, SynthError> {
    let v = fine.var_index(var)?;
    let (h, w) = (fine.height(), fine.width());
    if n > h * w {
        return Err(param("n", format!("{n} stations exceed the {} grid cells", h * w)));
    }
    if !noise_sd.is_finite() || noise_sd < 0.0 {
        return Err(param("noise_sd", format!("{noise_sd} must be finite and non-negative")));
    }
    let geo = fine.geometry();
    let cells = sample(rng, h * w, n).into_vec();
    let mut out = Vec::with_capacity(n * fine.n_time());
    for (s_i, &cell) in cells.iter().enumerate() {
        let (r, c) = (cell / w, cell % w);
        for fr in 0..fine.n_time() {
            let e: f64 = StandardNormal.sample(rng);
            out.push(StationRecord {
                station_id: format!("S{s_i:05}"),
                lat: geo.lat(r),
                lon: geo.lon(c),
                valid_time: fine.time_of(fr),
                variable: var.to_string(),
                value: fine.data()[[v, fr, r, c]] as f64 + noise_sd * e,
            });
        }
    }
    Ok(out)
}
