use std::path::PathBuf;

use clap::Args;
use dsr_core::gridio::{format_time, parse_time, write_grid, write_stations, GridField};
use dsr_core::synth::{gen_scene, gen_station_set, SynthError, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunDir, Settings};
use crate::error::{rt, CliError};
use crate::Common;

#[derive(Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Fine (hourly) frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Spatial coarsening factor of the coarse grid.
    #[arg(long)]
    coarsen: Option<usize>,
    /// Fine frames per coarse frame.
    #[arg(long)]
    time_stride: Option<usize>,
    /// Spectral exponent shared by all target fields.
    #[arg(long, allow_hyphen_values = true)]
    slope: Option<f64>,
    #[arg(long)]
    topo_strength: Option<f64>,
    #[arg(long)]
    phase_drift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Valid time of the first frame (ISO-8601, UTC).
    #[arg(long)]
    t0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lat0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lon0: Option<f64>,
    #[arg(long)]
    dlat: Option<f64>,
    #[arg(long)]
    dlon: Option<f64>,
    /// Number of station locations.
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    station_noise: Option<f64>,
    #[arg(long)]
    station_variable: Option<String>,
}

pub fn gen_synth(a: GenSynthArgs) -> Result<PathBuf, CliError> {
    let mut s = Settings::load("gen-synth", a.common.config.as_deref())?;
    let d = SynthSpec::default();
    let t0 = s.get("t0", a.t0, format_time(d.t0))?;
    let spec = SynthSpec {
        height: s.get("height", a.height, d.height)?,
        width: s.get("width", a.width, d.width)?,
        frames: s.get("frames", a.frames, d.frames)?,
        coarsen: s.get("coarsen", a.coarsen, d.coarsen)?,
        time_stride: s.get("time_stride", a.time_stride, d.time_stride)?,
        slopes: [s.get("slope", a.slope, d.slopes[0])?; 7],
        topo_strength: s.get("topo_strength", a.topo_strength, d.topo_strength)?,
        phase_drift: s.get("phase_drift", a.phase_drift, d.phase_drift)?,
        seed: s.get("seed", a.seed, d.seed)?,
        lat0: s.get("lat0", a.lat0, d.lat0)?,
        lon0: s.get("lon0", a.lon0, d.lon0)?,
        dlat: s.get("dlat", a.dlat, d.dlat)?,
        dlon: s.get("dlon", a.dlon, d.dlon)?,
        t0: parse_time(&t0).map_err(|e| CliError::Usage(format!("t0: {e}")))?,
        dt: d.dt,
    };
    let n_stations = s.get("stations", a.stations, 200usize)?;
    let noise = s.get("station_noise", a.station_noise, 0.5f64)?;
    let station_var = s.get("station_variable", a.station_variable, "TMP".to_string())?;
    s.finish()?;

    let scene = gen_scene(&spec).map_err(|e| match e {
        SynthError::Param { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(dsr_core::derive_seed(spec.seed, 0x5747, 0));
    let records = gen_station_set(&scene.fine, &station_var, n_stations, noise, &mut rng).map_err(|e| CliError::Usage(e.to_string()))?;
    let g = scene.fine.geometry();
    let dem = GridField::new(
        vec![dsr_core::prep::DEM_KEY.to_string()],
        scene.dem.clone().into_shape_with_order((1, 1, g.h, g.w)).expect("plane reshapes"),
        g.lat0,
        g.lon0,
        g.dlat,
        g.dlon,
        scene.fine.t0(),
        scene.fine.dt(),
    )
    .map_err(rt("dem"))?;

    let mut run = RunDir::create(&a.common.runs_dir)?;
    for (name, grid) in [("fine.grd", &scene.fine), ("coarse.grd", &scene.coarse), ("dem.grd", &dem)] {
        write_grid(grid, run.file(name)).map_err(rt(name))?;
        run.record(name);
    }
    write_stations(&records, run.file("stations.csv")).map_err(rt("stations.csv"))?;
    run.record("stations.csv");
    run.finish(&s)
}
