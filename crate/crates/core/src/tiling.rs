//! Random training patches and overlap-tiled inference with cosine blending.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{s, Array2, Array4, ArrayView4};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::prep::ConditioningStack;

pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_STRIDE: usize = 128;
pub const DEFAULT_PATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("sampler failed on tile (row {row}, col {col}): {msg}")]
    Sampler { row: usize, col: usize, msg: String },
}

/// Crops the same random `size x size` window from a `[V][T][H][W]` target
/// stack and its conditioning; returns the crops and the top-left corner.
pub fn sample_training_patch<R: Rng + ?Sized>(
    x: ArrayView4<'_, f32>,
    cond: &ConditioningStack,
    size: usize,
    rng: &mut R,
) -> Result<(Array4<f32>, ConditioningStack, (usize, usize)), TilingError> {
    let (_, t, h, w) = x.dim();
    let (_, ct, ch, cw) = cond.data.dim();
    if (ct, ch, cw) != (t, h, w) {
        return Err(TilingError::Range(format!(
            "target is {t}x{h}x{w} (TxHxW) but conditioning is {ct}x{ch}x{cw}"
        )));
    }
    if size == 0 || h < size || w < size {
        return Err(TilingError::Range(format!("domain {h}x{w} cannot hold a {size}x{size} patch")));
    }
    let r0 = rng.gen_range(0..=h - size);
    let c0 = rng.gen_range(0..=w - size);
    let patch = x.slice(s![.., .., r0..r0 + size, c0..c0 + size]).to_owned();
    Ok((patch, cond.crop(r0, c0, size, size), (r0, c0)))
}

/// Rising half-cosine over `overlap` pixels, sampled at pixel centres.
fn ramp(overlap: usize) -> Vec<f64> {
    (0..overlap)
        .map(|j| {
            let u = (j as f64 + 0.5) / overlap as f64;
            0.5 * (1.0 - (PI * u).cos())
        })
        .collect()
}

fn check_overlap(tile: usize, stride: usize) -> Result<usize, TilingError> {
    if stride == 0 || stride >= tile {
        return Err(TilingError::Config(format!(
            "stride {stride} must be in 1..{tile} so that tiles overlap"
        )));
    }
    Ok(tile - stride)
}

/// One-dimensional taper; `rise`/`fall` disable the ramp at a domain edge.
fn taper_1d(tile: usize, overlap: usize, rise: bool, fall: bool) -> Vec<f64> {
    let r = ramp(overlap);
    (0..tile)
        .map(|i| {
            let up = if rise && i < overlap { r[i] } else { 1.0 };
            let down = if fall && tile - 1 - i < overlap { r[tile - 1 - i] } else { 1.0 };
            up * down
        })
        .collect()
}

/// Separable interior taper raster for a tile.
pub fn taper_weight(tile: usize, stride: usize) -> Result<Array2<f64>, TilingError> {
    let overlap = check_overlap(tile, stride)?;
    let w1 = taper_1d(tile, overlap, true, true);
    Ok(Array2::from_shape_fn((tile, tile), |(i, j)| w1[i] * w1[j]))
}

/// Tile origins plus per-axis tapers and the accumulated weight sum.
#[derive(Clone, Debug)]
pub struct TileLayout {
    pub tile: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
    row_tapers: Vec<Vec<f64>>,
    col_tapers: Vec<Vec<f64>>,
    weight_sum: Array2<f64>,
}

fn origins(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut o = 0;
    while o + tile < n {
        o = (o + stride).min(n - tile);
        out.push(o);
    }
    out
}

fn axis_tapers(origins: &[usize], n: usize, tile: usize, overlap: usize) -> Vec<Vec<f64>> {
    origins.iter().map(|&o| taper_1d(tile, overlap, o > 0, o + tile < n)).collect()
}

/// Plans tiles over an `h x w` domain; the last row and column snap to the edge.
pub fn plan_tiles(h: usize, w: usize, tile: usize, stride: usize) -> Result<TileLayout, TilingError> {
    let overlap = check_overlap(tile, stride)?;
    if h < tile || w < tile {
        return Err(TilingError::Layout(format!("domain {h}x{w} is smaller than a {tile}x{tile} tile")));
    }
    let row_origins = origins(h, tile, stride);
    let col_origins = origins(w, tile, stride);
    let row_tapers = axis_tapers(&row_origins, h, tile, overlap);
    let col_tapers = axis_tapers(&col_origins, w, tile, overlap);
    let mut row_sum = vec![0.0; h];
    let mut col_sum = vec![0.0; w];
    for (o, t) in row_origins.iter().zip(&row_tapers) {
        row_sum[*o..*o + tile].iter_mut().zip(t).for_each(|(s, v)| *s += v);
    }
    for (o, t) in col_origins.iter().zip(&col_tapers) {
        col_sum[*o..*o + tile].iter_mut().zip(t).for_each(|(s, v)| *s += v);
    }
    let weight_sum = Array2::from_shape_fn((h, w), |(i, j)| row_sum[i] * col_sum[j]);
    Ok(TileLayout { tile, stride, height: h, width: w, row_origins, col_origins, row_tapers, col_tapers, weight_sum })
}

impl TileLayout {
    pub fn n_tiles(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    /// (row index, col index, row origin, col origin) in row-major order.
    pub fn tiles(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.n_tiles());
        for (ri, &r) in self.row_origins.iter().enumerate() {
            for (ci, &c) in self.col_origins.iter().enumerate() {
                out.push((ri, ci, r, c));
            }
        }
        out
    }

    /// Taper raster of tile (`ri`, `ci`), edge ramps clamped to 1.
    pub fn weight(&self, ri: usize, ci: usize) -> Array2<f64> {
        let (a, b) = (&self.row_tapers[ri], &self.col_tapers[ci]);
        Array2::from_shape_fn((self.tile, self.tile), |(i, j)| a[i] * b[j])
    }

    pub fn weight_sum(&self) -> &Array2<f64> {
        &self.weight_sum
    }

    /// Post-normalization weight sum at every pixel (1 up to rounding).
    pub fn normalized_coverage(&self) -> Array2<f64> {
        let mut acc = Array2::<f64>::zeros((self.height, self.width));
        for (ri, ci, r, c) in self.tiles() {
            let w = self.weight(ri, ci);
            let mut view = acc.slice_mut(s![r..r + self.tile, c..c + self.tile]);
            view.zip_mut_with(&w, |a, w| *a += w);
        }
        acc.zip_mut_with(&self.weight_sum, |a, s| *a /= s);
        acc
    }

    /// Text dump of the layout for debugging.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "domain {}x{} tile {} stride {} tiles {}x{}",
            self.height,
            self.width,
            self.tile,
            self.stride,
            self.row_origins.len(),
            self.col_origins.len()
        );
        for (ri, ci, r, c) in self.tiles() {
            let _ = writeln!(out, "tile {ri} {ci} origin {r} {c}");
        }
        out
    }
}

/// Derives an independent seed for tile (`row`, `col`).
pub fn tile_seed(seed: u64, row: usize, col: usize) -> u64 {
    crate::derive_seed(seed, row as u64, col as u64)
}

/// Runs `sampler` on every tile of `cond` and blends the `[V][T][tile][tile]`
/// predictions into a full-domain `[V][T][H][W]` field.
///
/// Tiles run in parallel; accumulation happens in fixed tile order so the
/// result does not depend on scheduling.
pub fn run_tiled<F>(sampler: F, cond: &ConditioningStack, layout: &TileLayout, seed: u64) -> Result<Array4<f32>, TilingError>
where
    F: Fn(&ConditioningStack, u64) -> Result<Array4<f32>, String> + Sync,
{
    let (_, t, h, w) = cond.data.dim();
    if (h, w) != (layout.height, layout.width) {
        return Err(TilingError::Layout(format!(
            "layout covers {}x{} but conditioning is {h}x{w}",
            layout.height, layout.width
        )));
    }
    let tiles = layout.tiles();
    let batch = rayon::current_num_threads().max(1);
    let mut acc: Option<Array4<f64>> = None;
    for chunk in tiles.chunks(batch) {
        let preds: Vec<Result<Array4<f32>, TilingError>> = chunk
            .par_iter()
            .map(|&(ri, ci, r, c)| {
                let sub = cond.crop(r, c, layout.tile, layout.tile);
                let y = sampler(&sub, tile_seed(seed, ri, ci)).map_err(|msg| TilingError::Sampler { row: ri, col: ci, msg })?;
                let (_, yt, yh, yw) = y.dim();
                if (yt, yh, yw) != (t, layout.tile, layout.tile) {
                    return Err(TilingError::Sampler {
                        row: ri,
                        col: ci,
                        msg: format!("prediction has shape {:?}", y.dim()),
                    });
                }
                Ok(y)
            })
            .collect();
        for (&(ri, ci, r, c), y) in chunk.iter().zip(preds) {
            let y = y?;
            let acc = acc.get_or_insert_with(|| Array4::zeros((y.dim().0, t, h, w)));
            if acc.dim().0 != y.dim().0 {
                return Err(TilingError::Sampler { row: ri, col: ci, msg: "channel count differs between tiles".into() });
            }
            let wt = layout.weight(ri, ci);
            for (mut a_v, y_v) in acc.outer_iter_mut().zip(y.outer_iter()) {
                for (mut a_t, y_t) in a_v.outer_iter_mut().zip(y_v.outer_iter()) {
                    let mut dst = a_t.slice_mut(s![r..r + layout.tile, c..c + layout.tile]);
                    ndarray::Zip::from(&mut dst).and(&y_t).and(&wt).for_each(|a, &y, &w| *a += w * y as f64);
                }
            }
        }
    }
    let acc = acc.ok_or_else(|| TilingError::Layout("layout has no tiles".into()))?;
    let mut out = Array4::<f32>::zeros(acc.dim());
    for (mut o_v, a_v) in out.outer_iter_mut().zip(acc.outer_iter()) {
        for (mut o_t, a_t) in o_v.outer_iter_mut().zip(a_v.outer_iter()) {
            ndarray::Zip::from(&mut o_t)
                .and(&a_t)
                .and(&layout.weight_sum)
                .for_each(|o, &a, &s| *o = (a / s) as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_complementarity() {
        let r = ramp(4);
        for j in 0..4 {
            assert!((r[j] + r[3 - j] - 1.0).abs() < 1e-15);
        }
        assert!(r.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn single_tile_has_unit_weights() {
        let l = plan_tiles(256, 256, 256, 128).unwrap();
        assert_eq!(l.n_tiles(), 1);
        assert!(l.weight(0, 0).iter().all(|&w| w == 1.0));
    }

    #[test]
    fn two_by_two_layout() {
        let l = plan_tiles(384, 384, 256, 128).unwrap();
        assert_eq!(l.row_origins, vec![0, 128]);
        assert_eq!(l.col_origins, vec![0, 128]);
    }

    #[test]
    fn snapped_last_tile_ends_at_edge() {
        let l = plan_tiles(300, 410, 128, 64).unwrap();
        assert_eq!(*l.row_origins.last().unwrap() + 128, 300);
        assert_eq!(*l.col_origins.last().unwrap() + 128, 410);
        assert!(l.normalized_coverage().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(taper_weight(64, 64), Err(TilingError::Config(_))));
        assert!(matches!(plan_tiles(100, 300, 128, 64), Err(TilingError::Layout(_))));
    }

    #[test]
    fn layout_dump_lists_every_tile() {
        let l = plan_tiles(384, 256, 256, 128).unwrap();
        let d = l.describe();
        assert_eq!(d.lines().count(), 1 + l.n_tiles());
        assert!(d.contains("tile 1 0 origin 128 0"));
    }
}
