//! Gridded and station data model plus the GRD1 binary and station CSV formats.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use ndarray::{Array4, ArrayView2};
use thiserror::Error;

pub const GRD1_MAGIC: &[u8; 4] = b"GRD1";
pub const GRD1_VERSION: u32 = 1;
/// Fixed part of the GRD1 header, before the variable-name table.
pub const GRD1_FIXED_HEADER: usize = 72;
pub const GRD1_NAME_BYTES: usize = 16;

pub const STATION_HEADER: [&str; 6] = ["station_id", "lat", "lon", "valid_time", "variable", "value"];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt grid file: {0}")]
    Corruption(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("out of range: {0}")]
    Range(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
}

impl From<std::io::Error> for GridError {
    fn from(e: std::io::Error) -> Self {
        GridError::Io(e.to_string())
    }
}

/// Horizontal raster geometry: cell-center origin and signed spacing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<(), GridError> {
        let finite = [self.lat0, self.lon0, self.dlat, self.dlon].iter().all(|v| v.is_finite());
        if !finite || self.dlat == 0.0 || self.dlon == 0.0 {
            return Err(GridError::Invalid(format!("bad geometry {self:?}")));
        }
        if self.h == 0 || self.w == 0 {
            return Err(GridError::Invalid("grid extents must be positive".into()));
        }
        Ok(())
    }

    pub fn lat(&self, row: usize) -> f64 {
        self.lat0 + row as f64 * self.dlat
    }

    pub fn lon(&self, col: usize) -> f64 {
        self.lon0 + col as f64 * self.dlon
    }

    /// (min, max) latitude of the cell-edge extent.
    pub fn lat_bounds(&self) -> (f64, f64) {
        edge_bounds(self.lat0, self.dlat, self.h)
    }

    pub fn lon_bounds(&self) -> (f64, f64) {
        edge_bounds(self.lon0, self.dlon, self.w)
    }

    /// Fractional (row, col) coordinate of a location.
    pub fn frac_index(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lat - self.lat0) / self.dlat, (lon - self.lon0) / self.dlon)
    }
}

fn edge_bounds(origin: f64, step: f64, n: usize) -> (f64, f64) {
    let a = origin - 0.5 * step;
    let b = origin + (n as f64 - 0.5) * step;
    (a.min(b), a.max(b))
}

/// Nearest index to fractional coordinate `f` over `0..n`, ties to the lower index.
fn nearest_index(f: f64, n: usize) -> usize {
    let i = (f - 0.5).ceil().max(0.0) as usize;
    i.min(n - 1)
}

/// Multi-variable space-time raster in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    variables: Vec<String>,
    data: Array4<f32>,
    geometry: Geometry,
    t0: i64,
    dt: u32,
}

impl GridField {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variables: Vec<String>,
        data: Array4<f32>,
        lat0: f64,
        lon0: f64,
        dlat: f64,
        dlon: f64,
        t0: i64,
        dt: u32,
    ) -> Result<Self, GridError> {
        let (nv, t, h, w) = data.dim();
        if nv != variables.len() {
            return Err(GridError::Invalid(format!("{} variable names for {nv} data planes", variables.len())));
        }
        if t == 0 {
            return Err(GridError::Invalid("grid needs at least one frame".into()));
        }
        if dt == 0 {
            return Err(GridError::Invalid("dt must be positive".into()));
        }
        let geometry = Geometry { lat0, lon0, dlat, dlon, h, w };
        geometry.validate()?;
        let mut seen = HashSet::new();
        for name in &variables {
            if name.is_empty() || name.len() > GRD1_NAME_BYTES || !name.is_ascii() || name.contains('\0') {
                return Err(GridError::Invalid(format!("variable name {name:?} must be 1-16 ASCII bytes")));
            }
            if !seen.insert(name.as_str()) {
                return Err(GridError::Invalid(format!("duplicate variable {name:?}")));
            }
        }
        let data = data.as_standard_layout().into_owned();
        Ok(Self { variables, data, geometry, t0, dt })
    }

    /// All-zero field on `geometry`.
    pub fn zeros(variables: Vec<String>, geometry: Geometry, t: usize, t0: i64, dt: u32) -> Result<Self, GridError> {
        let data = Array4::zeros((variables.len(), t, geometry.h, geometry.w));
        Self::new(variables, data, geometry.lat0, geometry.lon0, geometry.dlat, geometry.dlon, t0, dt)
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn dt(&self) -> u32 {
        self.dt
    }

    pub fn n_var(&self) -> usize {
        self.variables.len()
    }

    pub fn n_time(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.geometry.h
    }

    pub fn width(&self) -> usize {
        self.geometry.w
    }

    pub fn time_of(&self, frame: usize) -> i64 {
        self.t0 + frame as i64 * self.dt as i64
    }

    pub fn var_index(&self, name: &str) -> Result<usize, GridError> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| GridError::UnknownVariable(name.to_string()))
    }

    /// One [row][col] plane.
    pub fn plane(&self, var: usize, frame: usize) -> ArrayView2<'_, f32> {
        self.data.slice(ndarray::s![var, frame, .., ..])
    }

    /// Value of the nearest cell center at the nearest frame (ties to the lower index).
    pub fn sample_nearest(&self, var: &str, lat: f64, lon: f64, time: i64) -> Result<f32, GridError> {
        let v = self.var_index(var)?;
        let g = &self.geometry;
        let (la, lb) = g.lat_bounds();
        let (oa, ob) = g.lon_bounds();
        if !(la..=lb).contains(&lat) || !(oa..=ob).contains(&lon) {
            return Err(GridError::Range(format!("({lat}, {lon}) outside grid extent")));
        }
        let t_end = self.time_of(self.n_time() - 1);
        if time < self.t0 || time > t_end {
            return Err(GridError::Range(format!("time {time} outside [{}, {t_end}]", self.t0)));
        }
        let (fr, fc) = g.frac_index(lat, lon);
        let r = nearest_index(fr, g.h);
        let c = nearest_index(fc, g.w);
        let ft = (time - self.t0) as f64 / self.dt as f64;
        let t = nearest_index(ft, self.n_time());
        Ok(self.data[[v, t, r, c]])
    }

    /// Copy holding only the named variables, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<GridField, GridError> {
        let idx: Vec<usize> = names.iter().map(|n| self.var_index(n)).collect::<Result<_, _>>()?;
        let data = self.data.select(ndarray::Axis(0), &idx);
        let g = self.geometry;
        GridField::new(names.iter().map(|s| s.to_string()).collect(), data, g.lat0, g.lon0, g.dlat, g.dlon, self.t0, self.dt)
    }
}

/// GRD1 encoding of `g`.
pub fn encode_grid(g: &GridField) -> Vec<u8> {
    let (nv, t, h, w) = g.data.dim();
    let mut out = Vec::with_capacity(GRD1_FIXED_HEADER + nv * GRD1_NAME_BYTES + g.data.len() * 4);
    out.extend_from_slice(GRD1_MAGIC);
    for v in [GRD1_VERSION, nv as u32, t as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let geo = g.geometry;
    for v in [geo.lat0, geo.lon0, geo.dlat, geo.dlon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&g.t0.to_le_bytes());
    out.extend_from_slice(&g.dt.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for name in &g.variables {
        let mut buf = [0u8; GRD1_NAME_BYTES];
        buf[..name.len()].copy_from_slice(name.as_bytes());
        out.extend_from_slice(&buf);
    }
    for v in g.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_grid(g: &GridField, path: impl AsRef<Path>) -> Result<(), GridError> {
    let bytes = encode_grid(g);
    let mut f = fs::File::create(path.as_ref())
        .map_err(|e| GridError::Io(format!("{}: {e}", path.as_ref().display())))?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GridError> {
        if self.buf.len() - self.pos < n {
            return Err(GridError::Io(format!(
                "truncated grid file: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GridError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, GridError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, GridError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridField, GridError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != GRD1_MAGIC {
        return Err(GridError::Format(format!("bad magic {magic:?}, expected \"GRD1\"")));
    }
    let version = c.u32()?;
    if version != GRD1_VERSION {
        return Err(GridError::Format(format!("unsupported GRD1 version {version}")));
    }
    let nv = c.u32()? as usize;
    let t = c.u32()? as usize;
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let (lat0, lon0, dlat, dlon) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
    let t0 = c.i64()?;
    let dt = c.u32()?;
    let pad = c.u32()?;
    if pad != 0 {
        return Err(GridError::Corruption(format!("header pad word is {pad}, expected 0")));
    }
    let mut names = Vec::with_capacity(nv.min(4096));
    for _ in 0..nv {
        let raw = c.take(GRD1_NAME_BYTES)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(GRD1_NAME_BYTES);
        if raw[end..].iter().any(|&b| b != 0) || !raw[..end].is_ascii() {
            return Err(GridError::Corruption("malformed variable name".into()));
        }
        names.push(String::from_utf8(raw[..end].to_vec()).expect("ascii"));
    }
    let count = nv
        .checked_mul(t)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| GridError::Corruption("header extents overflow".into()))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| GridError::Corruption("header extents overflow".into()))?;
    let remaining = bytes.len() - c.pos;
    if remaining > expected {
        return Err(GridError::Corruption(format!(
            "payload is {remaining} bytes, header extents imply {expected}"
        )));
    }
    let payload = c.take(expected)?;
    let values: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let data = Array4::from_shape_vec((nv, t, h, w), values).expect("length checked");
    GridField::new(names, data, lat0, lon0, dlat, dlon, t0, dt).map_err(|e| match e {
        GridError::Invalid(m) => GridError::Corruption(m),
        other => other,
    })
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridField, GridError> {
    let bytes = fs::read(path.as_ref()).map_err(|e| GridError::Io(format!("{}: {e}", path.as_ref().display())))?;
    decode_grid(&bytes)
}

/// One surface observation.
#[derive(Clone, Debug, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub valid_time: i64,
    pub variable: String,
    pub value: f64,
}

impl StationRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("latitude {} outside [-90, 90]", self.lat));
        }
        if !(-180.0..360.0).contains(&self.lon) {
            return Err(format!("longitude {} outside [-180, 360)", self.lon));
        }
        Ok(())
    }
}

/// Parses ISO-8601 UTC (`2023-03-01T06:00:00Z`; a missing zone is read as UTC).
pub fn parse_time(s: &str) -> Result<i64, String> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc().timestamp());
        }
    }
    Err(format!("unparseable time {s:?}"))
}

pub fn format_time(epoch: i64) -> String {
    DateTime::<Utc>::from_timestamp(epoch, 0)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| epoch.to_string())
}

pub fn parse_stations(text: &str) -> Result<Vec<StationRecord>, GridError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| GridError::Schema(e.to_string()))?.clone();
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(STATION_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GridError::Schema(format!("missing column {name:?}")))?;
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            GridError::Row { line, msg: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = |msg: String| GridError::Row { line, msg };
        let field = |i: usize| rec.get(col[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64, GridError> {
            field(i)
                .parse::<f64>()
                .map_err(|_| row(format!("{}: unparseable number {:?}", STATION_HEADER[i], field(i))))
        };
        let r = StationRecord {
            station_id: field(0).to_string(),
            lat: num(1)?,
            lon: num(2)?,
            valid_time: parse_time(field(3)).map_err(row)?,
            variable: field(4).to_string(),
            value: num(5)?,
        };
        r.validate().map_err(row)?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_stations(path: impl AsRef<Path>) -> Result<Vec<StationRecord>, GridError> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| GridError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_stations(&text)
}

pub fn write_stations(records: &[StationRecord], path: impl AsRef<Path>) -> Result<(), GridError> {
    let mut wtr = csv::Writer::from_path(path.as_ref()).map_err(|e| GridError::Io(e.to_string()))?;
    let io = |e: csv::Error| GridError::Io(e.to_string());
    wtr.write_record(STATION_HEADER).map_err(io)?;
    for r in records {
        wtr.write_record([
            r.station_id.clone(),
            r.lat.to_string(),
            r.lon.to_string(),
            format_time(r.valid_time),
            r.variable.clone(),
            r.value.to_string(),
        ])
        .map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}
