//! Normalization, spatial/temporal interpolation and the static conditioning
//! channels (topography, sky-view factor, cosine solar zenith).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use thiserror::Error;

use crate::gridio::{GridError, GridField, Geometry};

pub const COND_VARIABLES: usize = 17;
pub const STATIC_CHANNELS: [&str; 3] = ["TOPO", "SVF", "COSZ"];
/// Key of the elevation entry in a statistics sidecar.
pub const DEM_KEY: &str = "DEM";
pub const SVF_RADIUS: usize = 100;
pub const SVF_AZIMUTHS: usize = 16;
const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("statistics file: {0}")]
    Stats(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    MinMax,
    Log1pMinMax,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::MinMax => "minmax",
            NormKind::Log1pMinMax => "log1p-minmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "minmax" => Some(NormKind::MinMax),
            "log1p-minmax" => Some(NormKind::Log1pMinMax),
            _ => None,
        }
    }
}

/// Per-variable scaling to [0, 1]. For log1p-minmax the bounds refer to log(1+x).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub vmin: f64,
    pub vmax: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind, vmin: f64, vmax: f64) -> Result<Self, PrepError> {
        if !(vmin.is_finite() && vmax.is_finite()) || vmax <= vmin {
            return Err(PrepError::Param(format!("need finite vmin < vmax, got [{vmin}, {vmax}]")));
        }
        if kind == NormKind::Log1pMinMax && vmin < 0.0 {
            return Err(PrepError::Param(format!("log1p-minmax needs vmin >= 0, got {vmin}")));
        }
        Ok(Self { kind, vmin, vmax })
    }

    /// Bounds covering `values`; a constant sample gets a unit-width range.
    pub fn fit(kind: NormKind, values: impl IntoIterator<Item = f64>) -> Result<Self, PrepError> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = match kind {
                NormKind::MinMax => v,
                NormKind::Log1pMinMax if v < 0.0 => {
                    return Err(PrepError::Domain(format!("negative value {v} under log1p-minmax")))
                }
                NormKind::Log1pMinMax => v.ln_1p(),
            };
            if !v.is_finite() {
                return Err(PrepError::Input("non-finite value while fitting bounds".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Err(PrepError::Input("cannot fit bounds on an empty sample".into()));
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Self::new(kind, lo, hi)
    }

    pub fn normalize(&self, x: f64) -> Result<f64, PrepError> {
        let v = match self.kind {
            NormKind::MinMax => x,
            NormKind::Log1pMinMax => {
                if x < 0.0 {
                    return Err(PrepError::Domain(format!("negative value {x} under log1p-minmax")));
                }
                x.ln_1p()
            }
        };
        Ok(((v - self.vmin) / (self.vmax - self.vmin)).clamp(0.0, 1.0))
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        let v = self.vmin + y * (self.vmax - self.vmin);
        match self.kind {
            NormKind::MinMax => v,
            NormKind::Log1pMinMax => v.exp_m1(),
        }
    }
}

pub fn normalize(x: &[f32], spec: &NormSpec) -> Result<Vec<f32>, PrepError> {
    x.iter().map(|&v| spec.normalize(v as f64).map(|y| y as f32)).collect()
}

pub fn denormalize(y: &[f32], spec: &NormSpec) -> Vec<f32> {
    y.iter().map(|&v| spec.denormalize(v as f64) as f32).collect()
}

/// Ordered variable -> NormSpec table, persisted as `variable,kind,vmin,vmax`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStats {
    entries: Vec<(String, NormSpec)>,
}

impl NormStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: &str, spec: NormSpec) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = spec,
            None => self.entries.push((name.to_string(), spec)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&NormSpec, PrepError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| PrepError::Config(format!("no normalization statistics for {name:?}")))
    }

    pub fn entries(&self) -> &[(String, NormSpec)] {
        &self.entries
    }

    /// Adds bounds for every variable of `g` over frames `frames` not already present.
    pub fn fit_grid(
        &mut self,
        g: &GridField,
        frames: std::ops::Range<usize>,
        kind_of: impl Fn(&str) -> NormKind,
    ) -> Result<(), PrepError> {
        for (v, name) in g.variables().iter().enumerate() {
            if self.entries.iter().any(|(n, _)| n == name) {
                continue;
            }
            let view = g.data().slice(s![v, frames.clone(), .., ..]);
            let spec = NormSpec::fit(kind_of(name), view.iter().map(|&x| x as f64))?;
            self.entries.push((name.clone(), spec));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,kind,vmin,vmax\n");
        for (name, s) in &self.entries {
            out.push_str(&format!("{name},{},{:e},{:e}\n", s.kind.as_str(), s.vmin, s.vmax));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, PrepError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| PrepError::Stats(e.to_string()))?.clone();
        let want = ["variable", "kind", "vmin", "vmax"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(PrepError::Stats(format!("expected header {}", want.join(","))));
        }
        let mut stats = Self::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| PrepError::Stats(e.to_string()))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |m: &str| PrepError::Stats(format!("line {line}: {m}"));
            let kind = NormKind::parse(&rec[1]).ok_or_else(|| bad("unknown kind"))?;
            let vmin: f64 = rec[2].parse().map_err(|_| bad("unparseable vmin"))?;
            let vmax: f64 = rec[3].parse().map_err(|_| bad("unparseable vmax"))?;
            let spec = NormSpec::new(kind, vmin, vmax).map_err(|e| bad(&e.to_string()))?;
            stats.insert(&rec[0], spec);
        }
        Ok(stats)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PrepError> {
        fs::write(path.as_ref(), self.to_csv()).map_err(|e| GridError::Io(format!("{}: {e}", path.as_ref().display())).into())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PrepError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| GridError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_csv(&text)
    }
}

/// Source index and weight of the upper neighbour along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    frac: f64,
}

fn axis_taps(src_origin: f64, src_step: f64, n_src: usize, targets: impl Iterator<Item = f64>) -> Result<Vec<Tap>, PrepError> {
    let tol = 1e-9;
    targets
        .map(|x| {
            let f = (x - src_origin) / src_step;
            if f < -0.5 - tol || f > n_src as f64 - 0.5 + tol {
                return Err(PrepError::Range(format!("target coordinate {x} outside the source extent")));
            }
            if n_src == 1 {
                return Ok(Tap { i0: 0, frac: 0.0 });
            }
            let f = f.clamp(0.0, (n_src - 1) as f64);
            let i0 = (f.floor() as usize).min(n_src - 2);
            Ok(Tap { i0, frac: f - i0 as f64 })
        })
        .collect()
}

fn bilinear_plane(src: ArrayView2<'_, f32>, rows: &[Tap], cols: &[Tap]) -> Array2<f32> {
    let (h, w) = src.dim();
    let at = |r: usize, c: usize| src[[r.min(h - 1), c.min(w - 1)]] as f64;
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
        let (r, c) = (rows[i], cols[j]);
        let top = at(r.i0, c.i0) * (1.0 - c.frac) + at(r.i0, c.i0 + 1) * c.frac;
        let bot = at(r.i0 + 1, c.i0) * (1.0 - c.frac) + at(r.i0 + 1, c.i0 + 1) * c.frac;
        (top * (1.0 - r.frac) + bot * r.frac) as f32
    })
}

/// Bilinear resampling of every variable and frame onto `target`.
///
/// Targets may lie anywhere inside the source cell-edge extent; beyond the hull
/// of source centers the edge values are held constant.
pub fn interp_bilinear(src: &GridField, target: &Geometry) -> Result<GridField, PrepError> {
    target.validate()?;
    let g = src.geometry();
    let rows = axis_taps(g.lat0, g.dlat, g.h, (0..target.h).map(|r| target.lat(r)))?;
    let cols = axis_taps(g.lon0, g.dlon, g.w, (0..target.w).map(|c| target.lon(c)))?;
    let (nv, t) = (src.n_var(), src.n_time());
    let mut data = Array4::<f32>::zeros((nv, t, target.h, target.w));
    for v in 0..nv {
        for k in 0..t {
            let plane = bilinear_plane(src.plane(v, k), &rows, &cols);
            data.slice_mut(s![v, k, .., ..]).assign(&plane);
        }
    }
    Ok(GridField::new(
        src.variables().to_vec(),
        data,
        target.lat0,
        target.lon0,
        target.dlat,
        target.dlon,
        src.t0(),
        src.dt(),
    )?)
}

/// Linear interpolation along time: output frame j samples source coordinate j·(Tc−1)/(Tt−1).
pub fn interp_time(src: &Array4<f32>, t_target: usize) -> Result<Array4<f32>, PrepError> {
    let (c, tc, h, w) = src.dim();
    if tc < 2 {
        return Err(PrepError::Param(format!("need at least 2 source frames, got {tc}")));
    }
    if t_target < 2 {
        return Err(PrepError::Param(format!("need at least 2 target frames, got {t_target}")));
    }
    let mut out = Array4::<f32>::zeros((c, t_target, h, w));
    for j in 0..t_target {
        // exact rational position avoids drift at shared frames
        let num = j * (tc - 1);
        let den = t_target - 1;
        let i0 = (num / den).min(tc - 2);
        let frac = (num - i0 * den) as f64 / den as f64;
        for ch in 0..c {
            let a = src.slice(s![ch, i0, .., ..]);
            let b = src.slice(s![ch, i0 + 1, .., ..]);
            let mut o = out.slice_mut(s![ch, j, .., ..]);
            ndarray::Zip::from(&mut o).and(&a).and(&b).for_each(|o, &a, &b| {
                *o = (a as f64 * (1.0 - frac) + b as f64 * frac) as f32;
            });
        }
    }
    Ok(out)
}

/// Day of year (1-based) and fractional UTC hour.
fn day_and_hour(time: i64) -> (f64, f64) {
    use chrono::{Datelike, Timelike};
    let t = chrono::DateTime::<chrono::Utc>::from_timestamp(time, 0).unwrap_or_default();
    let hour = t.hour() as f64 + t.minute() as f64 / 60.0 + t.second() as f64 / 3600.0;
    (t.ordinal() as f64, hour)
}

/// Equation of time in minutes (Spencer's Fourier series).
fn equation_of_time(day: f64, hour: f64) -> f64 {
    let g = 2.0 * PI / 365.0 * (day - 1.0 + (hour - 12.0) / 24.0);
    229.18
        * (0.000075 + 0.001868 * g.cos() - 0.032077 * g.sin() - 0.014615 * (2.0 * g).cos()
            - 0.040849 * (2.0 * g).sin())
}

/// cos of the solar zenith angle, clamped at 0 below the horizon.
pub fn cos_solar_zenith(lat: f64, lon: f64, time: i64) -> f64 {
    let (day, hour) = day_and_hour(time);
    let decl = (-23.44f64).to_radians() * (2.0 * PI * (day + 10.0) / 365.0).cos();
    let solar_minutes = hour * 60.0 + 4.0 * lon + equation_of_time(day, hour);
    let h = (solar_minutes / 4.0 - 180.0).to_radians();
    let phi = lat.to_radians();
    (phi.sin() * decl.sin() + phi.cos() * decl.cos() * h.cos()).max(0.0)
}

/// Sky-view factor with the default scan radius.
pub fn sky_view_factor(dem: ArrayView2<'_, f32>, cell_size: f64, n_azimuths: usize) -> Result<Array2<f32>, PrepError> {
    sky_view_factor_radius(dem, cell_size, n_azimuths, SVF_RADIUS)
}

/// SVF = mean over azimuths of cos²(max horizon elevation angle), horizon clamped at 0.
///
/// Each azimuth ray advances one cell along its dominant axis per step and
/// samples the nearest cell, up to `radius` steps or the domain edge.
pub fn sky_view_factor_radius(
    dem: ArrayView2<'_, f32>,
    cell_size: f64,
    n_azimuths: usize,
    radius: usize,
) -> Result<Array2<f32>, PrepError> {
    if n_azimuths < 4 {
        return Err(PrepError::Param(format!("need at least 4 azimuths, got {n_azimuths}")));
    }
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(PrepError::Param(format!("cell size must be positive, got {cell_size}")));
    }
    if dem.iter().any(|v| !v.is_finite()) {
        return Err(PrepError::Input("non-finite elevation".into()));
    }
    let (h, w) = dem.dim();
    let dirs: Vec<(f64, f64, f64)> = (0..n_azimuths)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / n_azimuths as f64;
            let (dr, dc) = (-az.cos(), az.sin());
            let m = dr.abs().max(dc.abs());
            (dr / m, dc / m, cell_size / m)
        })
        .collect();
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let z0 = dem[[r, c]] as f64;
            let mut acc = 0.0;
            for &(sr, sc, step_len) in &dirs {
                let mut tan_max = 0.0f64;
                for k in 1..=radius {
                    let rr = (r as f64 + k as f64 * sr).round();
                    let cc = (c as f64 + k as f64 * sc).round();
                    if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
                        break;
                    }
                    let dz = dem[[rr as usize, cc as usize]] as f64 - z0;
                    tan_max = tan_max.max(dz / (k as f64 * step_len));
                }
                // cos²(atan t) = 1 / (1 + t²)
                acc += 1.0 / (1.0 + tan_max * tan_max);
            }
            out[[r, c]] = (acc / n_azimuths as f64) as f32;
        }
    }
    Ok(out)
}

/// Approximate ground cell size in meters from the latitude spacing.
pub fn cell_size_m(g: &Geometry) -> f64 {
    g.dlat.abs() * METERS_PER_DEGREE
}

/// The 20-channel normalized conditioning stack [channel][time][row][col].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningStack {
    pub data: Array4<f32>,
    pub names: Vec<String>,
}

impl ConditioningStack {
    pub fn n_time(&self) -> usize {
        self.data.dim().1
    }

    /// Spatial crop of every channel and frame.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> ConditioningStack {
        let data = self.data.slice(s![.., .., r0..r0 + h, c0..c0 + w]).to_owned();
        ConditioningStack { data, names: self.names.clone() }
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        if self.data.dim().0 != COND_VARIABLES + STATIC_CHANNELS.len() || self.names.len() != self.data.dim().0 {
            return Err(PrepError::Config(format!("conditioning needs 20 channels, got {}", self.data.dim().0)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(PrepError::Input("non-finite conditioning value".into()));
        }
        Ok(())
    }
}

/// Builds the conditioning stack for target frames at `times` on `target`.
///
/// `coarse` must hold the 17 conditioning variables with its first and last
/// frame coinciding with `times[0]` and `times[last]`; `dem` lives on `target`.
pub fn build_conditioning(
    coarse: &GridField,
    dem: ArrayView2<'_, f32>,
    target: &Geometry,
    times: &[i64],
    stats: &NormStats,
) -> Result<ConditioningStack, PrepError> {
    if coarse.n_var() != COND_VARIABLES {
        return Err(PrepError::Config(format!(
            "conditioning needs {COND_VARIABLES} coarse variables, got {}",
            coarse.n_var()
        )));
    }
    if dem.dim() != (target.h, target.w) {
        return Err(PrepError::Config(format!("DEM is {:?}, target grid is {}x{}", dem.dim(), target.h, target.w)));
    }
    let tt = times.len();
    if tt < 2 {
        return Err(PrepError::Param("need at least 2 target frames".into()));
    }
    let last = coarse.time_of(coarse.n_time() - 1);
    if coarse.t0() != times[0] || last != times[tt - 1] {
        return Err(PrepError::Range(format!(
            "coarse frames span [{}, {last}], target frames span [{}, {}]",
            coarse.t0(),
            times[0],
            times[tt - 1]
        )));
    }
    let spatial = interp_bilinear(coarse, target)?;
    let mut vars = interp_time(spatial.data(), tt)?;
    for (v, name) in coarse.variables().iter().enumerate() {
        let spec = stats.get(name)?;
        for x in vars.index_axis_mut(Axis(0), v).iter_mut() {
            *x = spec.normalize(*x as f64)? as f32;
        }
    }
    let (h, w) = (target.h, target.w);
    let mut data = Array4::<f32>::zeros((COND_VARIABLES + 3, tt, h, w));
    data.slice_mut(s![..COND_VARIABLES, .., .., ..]).assign(&vars);
    let dem_spec = stats.get(DEM_KEY)?;
    let topo = dem.mapv(|z| dem_spec.normalize(z as f64).map(|y| y as f32).unwrap_or(0.0));
    let svf = sky_view_factor(dem, cell_size_m(target), SVF_AZIMUTHS)?;
    for k in 0..tt {
        data.slice_mut(s![COND_VARIABLES, k, .., ..]).assign(&topo);
        data.slice_mut(s![COND_VARIABLES + 1, k, .., ..]).assign(&svf);
        let mut cz = data.slice_mut(s![COND_VARIABLES + 2, k, .., ..]);
        for ((r, c), v) in cz.indexed_iter_mut() {
            *v = cos_solar_zenith(target.lat(r), target.lon(c), times[k]) as f32;
        }
    }
    let mut names: Vec<String> = coarse.variables().to_vec();
    names.extend(STATIC_CHANNELS.iter().map(|s| s.to_string()));
    let stack = ConditioningStack { data, names };
    stack.validate()?;
    Ok(stack)
}

/// Normalization kind used for a variable: log1p for precipitation.
pub fn default_kind(name: &str) -> NormKind {
    if name == crate::PRECIP_VARIABLE {
        NormKind::Log1pMinMax
    } else {
        NormKind::MinMax
    }
}

/// Fits statistics for every fine and coarse variable over `frames` of the
/// fine field (and the matching span of the coarse field), plus the DEM.
pub fn fit_scene_stats(
    fine: &GridField,
    coarse: &GridField,
    dem: ArrayView2<'_, f32>,
    frames: std::ops::Range<usize>,
) -> Result<NormStats, PrepError> {
    if frames.is_empty() || frames.end > fine.n_time() {
        return Err(PrepError::Range(format!("frames {frames:?} outside 0..{}", fine.n_time())));
    }
    let mut stats = NormStats::new();
    stats.fit_grid(fine, frames.clone(), default_kind)?;
    let t_first = fine.time_of(frames.start);
    let t_last = fine.time_of(frames.end - 1);
    let c: Vec<usize> = (0..coarse.n_time())
        .filter(|&k| (t_first..=t_last).contains(&coarse.time_of(k)))
        .collect();
    let c = if c.is_empty() { 0..coarse.n_time() } else { c[0]..c[c.len() - 1] + 1 };
    stats.fit_grid(coarse, c, default_kind)?;
    stats.insert(DEM_KEY, NormSpec::fit(NormKind::MinMax, dem.iter().map(|&z| z as f64))?);
    Ok(stats)
}

/// Normalizes every variable of `g` with its named statistics.
pub fn normalize_field(g: &GridField, stats: &NormStats) -> Result<Array4<f32>, PrepError> {
    let mut out = g.data().clone();
    for (v, name) in g.variables().iter().enumerate() {
        let spec = stats.get(name)?;
        for x in out.index_axis_mut(Axis(0), v).iter_mut() {
            *x = spec.normalize(*x as f64)? as f32;
        }
    }
    Ok(out)
}

/// Maps normalized `[V][T][H][W]` data back to physical units.
pub fn denormalize_field(data: &Array4<f32>, names: &[&str], stats: &NormStats) -> Result<Array4<f32>, PrepError> {
    if names.len() != data.dim().0 {
        return Err(PrepError::Config(format!("{} names for {} variables", names.len(), data.dim().0)));
    }
    let mut out = data.clone();
    for (v, name) in names.iter().enumerate() {
        let spec = stats.get(name)?;
        out.index_axis_mut(Axis(0), v).mapv_inplace(|y| spec.denormalize(y as f64) as f32);
    }
    Ok(out)
}

/// Copies a `[V][T][H][W]` array into a tensor of scalar `S`.
pub fn to_tensor<S: crate::Scalar>(a: &Array4<f32>) -> crate::tensornet::Tensor<S> {
    let (v, t, h, w) = a.dim();
    let data = a.iter().map(|&x| S::of(x as f64)).collect();
    crate::tensornet::Tensor::new(&[v, t, h, w], data).expect("shape matches length")
}

/// Copies a rank-4 tensor into an `f32` array.
pub fn from_tensor<S: crate::Scalar>(t: &crate::tensornet::Tensor<S>) -> Result<Array4<f32>, PrepError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(PrepError::Config(format!("expected a rank-4 tensor, got shape {s:?}")));
    }
    let data = t.data().iter().map(|x| x.f64() as f32).collect();
    Array4::from_shape_vec((s[0], s[1], s[2], s[3]), data).map_err(|e| PrepError::Config(e.to_string()))
}
