//! Skill metrics, precipitation accumulation, radial power spectra, station
//! verification and report tables.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::gridio::{GridError, GridField, StationRecord};
use crate::scalar::Scalar;

pub const REPORT_HEADER: &str = "variable,lead_h,model,r,rmse,bias,mae,n";
pub const PSD_HEADER: &str = "wavelength_km,power";
pub const PRECIP_WINDOW: usize = 6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Pointwise scores; `r` is `None` when either field is constant or n < 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkillScores {
    pub r: Option<f64>,
    pub rmse: f64,
    pub bias: f64,
    pub mae: f64,
    pub n: usize,
}

/// Scores of `pred` against `reference` over cells where `mask` is true.
pub fn skill<S: Scalar>(pred: &[S], reference: &[S], mask: Option<&[bool]>) -> Result<SkillScores, VerifyError> {
    if pred.len() != reference.len() {
        return Err(VerifyError::Shape(format!("{} predictions vs {} references", pred.len(), reference.len())));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(VerifyError::Shape(format!("mask has {} cells, fields have {}", m.len(), pred.len())));
        }
    }
    let pairs = || {
        pred.iter()
            .zip(reference)
            .enumerate()
            .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
            .map(|(_, (p, r))| (p.f64(), r.f64()))
    };
    let n = pairs().count();
    if n == 0 {
        return Err(VerifyError::Range("no unmasked samples".into()));
    }
    let nf = n as f64;
    let (mut sp, mut sr, mut se, mut sae, mut sse) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, r) in pairs() {
        let e = p - r;
        sp += p;
        sr += r;
        se += e;
        sae += e.abs();
        sse += e * e;
    }
    let (mp, mr) = (sp / nf, sr / nf);
    let (mut cov, mut vp, mut vr) = (0.0, 0.0, 0.0);
    for (p, r) in pairs() {
        let (dp, dr) = (p - mp, r - mr);
        cov += dp * dr;
        vp += dp * dp;
        vr += dr * dr;
    }
    let r = (n >= 2 && vp > 0.0 && vr > 0.0).then(|| (cov / (vp.sqrt() * vr.sqrt())).clamp(-1.0, 1.0));
    Ok(SkillScores { r, rmse: (sse / nf).sqrt(), bias: se / nf, mae: sae / nf, n })
}

/// Non-overlapping `window`-frame sums of `var`; output frame `j` is stamped
/// at the last contributing frame.
pub fn accumulate_precip(g: &GridField, var: &str, window: usize) -> Result<GridField, VerifyError> {
    let v = g.var_index(var)?;
    let t = g.n_time();
    if window == 0 || t < window {
        return Err(VerifyError::Range(format!("{t} frames cannot fill a {window}-frame window")));
    }
    let n_out = t / window;
    let src = g.data().index_axis(Axis(0), v);
    let (h, w) = (g.height(), g.width());
    let mut out = Array4::<f32>::zeros((1, n_out, h, w));
    for j in 0..n_out {
        let mut acc = Array2::<f64>::zeros((h, w));
        for f in j * window..(j + 1) * window {
            acc.zip_mut_with(&src.index_axis(Axis(0), f), |a, &x| *a += x as f64);
        }
        out.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), j).assign(&acc.mapv(|x| x as f32));
    }
    let geo = g.geometry();
    let dt = g.dt().checked_mul(window as u32).ok_or_else(|| VerifyError::Range("window too long".into()))?;
    Ok(GridField::new(
        vec![var.to_string()],
        out,
        geo.lat0,
        geo.lon0,
        geo.dlat,
        geo.dlon,
        g.time_of(window - 1),
        dt,
    )?)
}

/// Ring-averaged spectral power by wavelength.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialPsd {
    /// Strictly decreasing, from N·dx down to 2·dx.
    pub wavelength_km: Vec<f64>,
    pub power: Vec<f64>,
    /// Number of Fourier coefficients in each ring.
    pub count: Vec<usize>,
    pub dx_km: f64,
    pub hann: bool,
}

impl RadialPsd {
    /// Least-squares slope of log power against log wavenumber over rings
    /// whose wavelength lies in `[lambda_min, lambda_max]`.
    pub fn slope(&self, lambda_min: f64, lambda_max: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .wavelength_km
            .iter()
            .zip(&self.power)
            .filter(|(l, p)| **l >= lambda_min && **l <= lambda_max && **p > 0.0)
            .map(|(l, p)| ((1.0 / l).ln(), p.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{PSD_HEADER}\n");
        for (l, p) in self.wavelength_km.iter().zip(&self.power) {
            let _ = writeln!(out, "{l},{p}");
        }
        out
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos())).collect()
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Radial PSD of a 2D field with grid spacing `dx_km`.
///
/// Power is |F|²/(H·W)² after mean removal, divided by the mean squared
/// window weight when the Hann window is applied, then averaged over integer
/// wavenumber rings 1..=N/2 with N = min(H, W).
pub fn radial_psd<S: Scalar>(field: ArrayView2<'_, S>, dx_km: f64, hann_window: bool) -> Result<RadialPsd, VerifyError> {
    let (h, w) = field.dim();
    if h < 8 || w < 8 {
        return Err(VerifyError::Range(format!("field {h}x{w} is smaller than 8x8")));
    }
    if !(dx_km.is_finite() && dx_km > 0.0) {
        return Err(VerifyError::Input(format!("grid spacing {dx_km} km")));
    }
    if field.iter().any(|v| !v.f64().is_finite()) {
        return Err(VerifyError::Input("non-finite value in field".into()));
    }
    let mean = field.iter().map(|v| v.f64()).sum::<f64>() / (h * w) as f64;
    let (wr, wc) = if hann_window { (hann(h), hann(w)) } else { (vec![1.0; h], vec![1.0; w]) };
    let w2 = wr.iter().map(|x| x * x).sum::<f64>() / h as f64 * (wc.iter().map(|x| x * x).sum::<f64>() / w as f64);
    let mut buf: Vec<Complex<f64>> = field
        .indexed_iter()
        .map(|((i, j), v)| Complex::new((v.f64() - mean) * wr[i] * wc[j], 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    row_fft.process(&mut buf);
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    let n = h.min(w);
    let n_rings = n / 2;
    let norm = ((h * w) as f64).powi(2) * w2;
    let mut sum = vec![0.0; n_rings + 1];
    let mut count = vec![0usize; n_rings + 1];
    for i in 0..h {
        let ky = signed_freq(i, h) * n as f64 / h as f64;
        for j in 0..w {
            let kx = signed_freq(j, w) * n as f64 / w as f64;
            let ring = (ky * ky + kx * kx).sqrt().round() as usize;
            if (1..=n_rings).contains(&ring) {
                sum[ring] += buf[i * w + j].norm_sqr() / norm;
                count[ring] += 1;
            }
        }
    }
    let rings: Vec<usize> = (1..=n_rings).collect();
    Ok(RadialPsd {
        wavelength_km: rings.iter().map(|&k| n as f64 * dx_km / k as f64).collect(),
        power: rings.iter().map(|&k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 }).collect(),
        count: rings.iter().map(|&k| count[k]).collect(),
        dx_km,
        hann: hann_window,
    })
}

/// Per-lead station scores; `None` where no observation pairs up.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadScores {
    pub lead_h: u32,
    pub scores: Option<SkillScores>,
}

/// Initialization time of a forecast whose first frame is at lead `dt`.
pub fn init_time(pred: &GridField) -> i64 {
    pred.t0() - pred.dt() as i64
}

/// Lead of frame `i` in hours.
pub fn frame_lead_h(pred: &GridField, i: usize) -> f64 {
    (i as f64 + 1.0) * pred.dt() as f64 / 3600.0
}

/// Pairs each `var` observation valid at init + lead with the prediction's
/// nearest cell. Stations outside the grid extent are skipped.
pub fn verify_stations(
    pred: &GridField,
    stations: &[StationRecord],
    var: &str,
    lead_times_h: &[u32],
) -> Result<Vec<LeadScores>, VerifyError> {
    pred.var_index(var)?;
    let init = init_time(pred);
    let mut out = Vec::with_capacity(lead_times_h.len());
    for &lead in lead_times_h {
        let valid = init + lead as i64 * 3600;
        let mut p = Vec::new();
        let mut o = Vec::new();
        for s in stations.iter().filter(|s| s.variable == var && s.valid_time == valid) {
            match pred.sample_nearest(var, s.lat, s.lon, valid) {
                Ok(v) => {
                    p.push(v as f64);
                    o.push(s.value);
                }
                Err(GridError::Range(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let scores = if p.is_empty() { None } else { Some(skill(&p, &o, None)?) };
        out.push(LeadScores { lead_h: lead, scores });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variable: String,
    pub lead_h: u32,
    pub model: String,
    pub scores: SkillScores,
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or_else(|| "NaN".to_string(), |r| r.to_string())
}

/// Score table sorted by (variable, lead, model).
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut rows: Vec<&ReportRow> = rows.iter().collect();
    rows.sort_by(|a, b| (&a.variable, a.lead_h, &a.model).cmp(&(&b.variable, b.lead_h, &b.model)));
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let s = &r.scores;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variable,
            r.lead_h,
            r.model,
            fmt_r(s.r),
            s.rmse,
            s.bias,
            s.mae,
            s.n
        );
    }
    out
}
