use std::path::PathBuf;

use clap::Args;
use dsr_core::gridio::{read_stations, GridField};
use dsr_core::verify::{accumulate_precip, radial_psd, report_csv, verify_stations, ReportRow, SkillScores, PRECIP_WINDOW};
use dsr_core::PRECIP_VARIABLE;
use ndarray::s;

use crate::config::{RunDir, Settings};
use crate::data;
use crate::error::{rt, CliError};
use crate::Common;

const KM_PER_DEGREE: f64 = 111.32;

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Forecast GRD1.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Reference GRD1 on the same grid and times.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Comma-separated variables; defaults to all forecast variables.
    #[arg(long)]
    variables: Option<String>,
    /// Model label written to the report.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
pub struct PsdArgs {
    #[command(flatten)]
    common: Common,
    /// GRD1 holding the fields.
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    variables: Option<String>,
    /// Grid spacing in km; defaults to the latitude spacing.
    #[arg(long)]
    dx_km: Option<f64>,
    /// Apply a Hann window before the transform.
    #[arg(long)]
    hann: Option<bool>,
}

#[derive(Args)]
pub struct StationsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Station observation CSV.
    #[arg(long)]
    stations: Option<PathBuf>,
    #[arg(long)]
    variable: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated lead hours; defaults to every forecast frame.
    #[arg(long)]
    leads: Option<String>,
}

fn variable_list(spec: &str, g: &GridField) -> Result<Vec<String>, CliError> {
    if spec == "all" {
        return Ok(g.variables().to_vec());
    }
    let names: Vec<String> = spec.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    for n in &names {
        g.var_index(n).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(names)
}

/// Names the first axis along which two grids disagree.
fn check_alignment(a: &GridField, b: &GridField) -> Result<(), CliError> {
    let (ga, gb) = (a.geometry(), b.geometry());
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
    let axis = if ga.h != gb.h || !close(ga.lat0, gb.lat0) || !close(ga.dlat, gb.dlat) {
        Some("latitude")
    } else if ga.w != gb.w || !close(ga.lon0, gb.lon0) || !close(ga.dlon, gb.dlon) {
        Some("longitude")
    } else if a.n_time() != b.n_time() || a.t0() != b.t0() || a.dt() != b.dt() {
        Some("time")
    } else {
        None
    };
    match axis {
        Some(axis) => Err(CliError::Runtime(format!("alignment error: prediction and reference differ along the {axis} axis"))),
        None => Ok(()),
    }
}

fn frame_scores(p: &GridField, r: &GridField, var: &str, model: &str) -> Result<Vec<ReportRow>, CliError> {
    let (vp, vr) = (p.var_index(var).map_err(rt(var))?, r.var_index(var).map_err(rt(var))?);
    let mut rows = Vec::with_capacity(p.n_time());
    for i in 0..p.n_time() {
        let a = p.data().slice(s![vp, i, .., ..]);
        let b = r.data().slice(s![vr, i, .., ..]);
        let a: Vec<f32> = a.iter().copied().collect();
        let b: Vec<f32> = b.iter().copied().collect();
        let scores = dsr_core::verify::skill(&a, &b, None).map_err(rt(var))?;
        rows.push(ReportRow { variable: var.to_string(), lead_h: data::lead_hours(p, i)?, model: model.to_string(), scores });
    }
    Ok(rows)
}

pub fn verify(a: VerifyArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("verify", a.common.config.as_deref())?;
    let pred_path: PathBuf = s.require("pred", a.pred)?;
    let ref_path: PathBuf = s.require("reference", a.reference)?;
    let vars = s.get("variables", a.variables, "all".to_string())?;
    let model = s.get("model", a.model, "model".to_string())?;
    s.finish()?;
    s.input_digest("pred", &pred_path)?;
    s.input_digest("reference", &ref_path)?;
    let pred = data::grid(&pred_path)?;
    let reference = data::grid(&ref_path)?;
    check_alignment(&pred, &reference)?;
    let mut rows = Vec::new();
    for var in variable_list(&vars, &pred)? {
        reference.var_index(&var).map_err(|e| CliError::Runtime(format!("reference: {e}")))?;
        if var == PRECIP_VARIABLE && pred.n_time() >= PRECIP_WINDOW {
            let p = accumulate_precip(&pred, &var, PRECIP_WINDOW).map_err(rt(&var))?;
            let r = accumulate_precip(&reference, &var, PRECIP_WINDOW).map_err(rt(&var))?;
            rows.extend(frame_scores(&p, &r, &var, &model)?);
        } else {
            rows.extend(frame_scores(&pred, &reference, &var, &model)?);
        }
    }
    let mut run = RunDir::create(&a.common.runs_dir)?;
    run.write("scores.csv", report_csv(&rows))?;
    run.finish(&s)
}

pub fn psd(a: PsdArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("psd", a.common.config.as_deref())?;
    let path: PathBuf = s.require("field", a.field)?;
    let vars = s.get("variables", a.variables, "all".to_string())?;
    let dx = s.optional("dx_km", a.dx_km)?;
    let hann = s.get("hann", a.hann, true)?;
    s.finish()?;
    s.input_digest("field", &path)?;
    let g = data::grid(&path)?;
    let dx = dx.unwrap_or(g.geometry().dlat.abs() * KM_PER_DEGREE);
    let mut run = RunDir::create(&a.common.runs_dir)?;
    let mut summary = String::from("variable,slope\n");
    for var in variable_list(&vars, &g)? {
        let v = g.var_index(&var).map_err(rt(&var))?;
        let mut mean: Option<dsr_core::verify::RadialPsd> = None;
        for t in 0..g.n_time() {
            let p = radial_psd(g.plane(v, t), dx, hann).map_err(rt(&var))?;
            match &mut mean {
                None => mean = Some(p),
                Some(m) => m.power.iter_mut().zip(&p.power).for_each(|(a, b)| *a += b),
            }
        }
        let mut m = mean.ok_or_else(|| CliError::Runtime(format!("{var}: no frames")))?;
        m.power.iter_mut().for_each(|p| *p /= g.n_time() as f64);
        let n = g.height().min(g.width()) as f64;
        let slope = m.slope(4.0 * dx, n * dx / 4.0).map_or("NaN".to_string(), |s| s.to_string());
        summary.push_str(&format!("{var},{slope}\n"));
        run.write(&format!("psd_{var}.csv"), m.to_csv())?;
    }
    run.write("psd_slopes.csv", summary)?;
    s.get(
        "psd_convention",
        None,
        "mean-removed |F|^2/N^2 per unit mean window power, integer-ring average, frame mean".to_string(),
    )?;
    run.finish(&s)
}

pub fn stations(a: StationsArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("stations", a.common.config.as_deref())?;
    let pred_path: PathBuf = s.require("pred", a.pred)?;
    let st_path: PathBuf = s.require("stations", a.stations)?;
    let var = s.get("variable", a.variable, "TMP".to_string())?;
    let model = s.get("model", a.model, "model".to_string())?;
    let leads = s.get("leads", a.leads, "all".to_string())?;
    s.finish()?;
    s.input_digest("pred", &pred_path)?;
    s.input_digest("stations", &st_path)?;
    let pred = data::grid(&pred_path)?;
    pred.var_index(&var).map_err(|e| CliError::Usage(e.to_string()))?;
    let records = read_stations(&st_path).map_err(rt(st_path.display()))?;
    let leads: Vec<u32> = if leads == "all" {
        (0..pred.n_time()).map(|i| data::lead_hours(&pred, i)).collect::<Result<_, _>>()?
    } else {
        leads
            .split(',')
            .map(|l| l.trim().parse().map_err(|_| CliError::Usage(format!("invalid lead `{l}`"))))
            .collect::<Result<_, _>>()?
    };
    let scores = verify_stations(&pred, &records, &var, &leads).map_err(rt("stations"))?;
    let empty = SkillScores { r: None, rmse: f64::NAN, bias: f64::NAN, mae: f64::NAN, n: 0 };
    let rows: Vec<ReportRow> = scores
        .into_iter()
        .map(|l| ReportRow { variable: var.clone(), lead_h: l.lead_h, model: model.clone(), scores: l.scores.unwrap_or(empty) })
        .collect();
    let mut run = RunDir::create(&a.common.runs_dir)?;
    run.write("station_scores.csv", report_csv(&rows))?;
    run.finish(&s)
}
