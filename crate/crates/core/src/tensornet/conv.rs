//! 3D cross-correlation with zero padding, lowered to one GEMM per output frame.

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Stride and zero padding along (time, row, col).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    /// Unit stride, padding that preserves extents for a cubic kernel of size `k`.
    pub fn same(k: usize) -> Self {
        Self { stride: [1; 3], pad: [k / 2; 3] }
    }

    /// Stride 2 over rows and cols only (time untouched), 3x3x3 kernel.
    pub fn down_hw() -> Self {
        Self { stride: [1, 2, 2], pad: [1, 1, 1] }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub inp: [usize; 3],
    pub ker: [usize; 3],
    pub out: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], spec: Conv3dSpec) -> Result<Self, TensorError> {
        if x.len() != 4 || w.len() != 5 {
            return Err(TensorError::Shape(format!(
                "conv3d expects x [C][T][H][W] and w [Co][Ci][kT][kH][kW], got {x:?} and {w:?}"
            )));
        }
        if w[1] != x[0] {
            return Err(TensorError::Shape(format!(
                "conv3d channel mismatch: input has {} channels, kernel expects {}",
                x[0], w[1]
            )));
        }
        let ker = [w[2], w[3], w[4]];
        if ker.iter().any(|&k| k % 2 == 0) {
            return Err(TensorError::Shape(format!("conv3d kernel extents must be odd, got {ker:?}")));
        }
        if spec.stride.iter().any(|&s| s == 0) {
            return Err(TensorError::Config("conv3d stride must be positive".into()));
        }
        let inp = [x[1], x[2], x[3]];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = inp[a] + 2 * spec.pad[a];
            if padded < ker[a] {
                return Err(TensorError::Shape(format!(
                    "conv3d axis {a}: padded extent {padded} smaller than kernel {}",
                    ker[a]
                )));
            }
            out[a] = (padded - ker[a]) / spec.stride[a] + 1;
        }
        Ok(Self { ci: x[0], co: w[0], inp, ker, out, stride: spec.stride, pad: spec.pad })
    }

    pub fn k(&self) -> usize {
        self.ci * self.ker[0] * self.ker[1] * self.ker[2]
    }

    pub fn out_plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.co, self.out[0], self.out[1], self.out[2]]
    }

    fn pointwise(&self) -> bool {
        self.ker == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn extent_preserving(&self) -> bool {
        self.stride == [1, 1, 1] && (0..3).all(|a| self.pad[a] == self.ker[a] / 2)
    }

    /// Valid output-index range along one axis for kernel offset `d`.
    fn valid(&self, axis: usize, d: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.stride[axis], self.pad[axis], self.inp[axis], self.out[axis]);
        // need 0 <= i*s + d - p < n
        let lo = if d >= p { 0 } else { (p - d).div_ceil(s) };
        let hi = if n + p > d { ((n + p - d - 1) / s + 1).min(o) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Fills `col` ([K][Ho*Wo]) with the receptive fields of output frame `to`.
    fn im2col<S: Scalar>(&self, x: &[S], to: usize, col: &mut [S]) {
        let [t, h, w] = self.inp;
        let [kt, kh, kw] = self.ker;
        let [_, ho_n, wo_n] = self.out;
        let plane = ho_n * wo_n;
        let ti0 = (to * self.stride[0]) as isize - self.pad[0] as isize;
        for ci in 0..self.ci {
            for dt in 0..kt {
                let ti = ti0 + dt as isize;
                for dh in 0..kh {
                    let (hlo, hhi) = self.valid(1, dh);
                    for dw in 0..kw {
                        let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                        let dst = &mut col[row * plane..(row + 1) * plane];
                        if ti < 0 || ti as usize >= t {
                            dst.fill(S::zero());
                            continue;
                        }
                        let (wlo, whi) = self.valid(2, dw);
                        let base = (ci * t + ti as usize) * h;
                        for ho in 0..ho_n {
                            let seg = &mut dst[ho * wo_n..(ho + 1) * wo_n];
                            if ho < hlo || ho >= hhi {
                                seg.fill(S::zero());
                                continue;
                            }
                            let hi = ho * self.stride[1] + dh - self.pad[1];
                            let src = &x[(base + hi) * w..(base + hi + 1) * w];
                            seg[..wlo].fill(S::zero());
                            seg[whi..].fill(S::zero());
                            if self.stride[2] == 1 {
                                let start = wlo + dw - self.pad[2];
                                seg[wlo..whi].copy_from_slice(&src[start..start + (whi - wlo)]);
                            } else {
                                for wo in wlo..whi {
                                    seg[wo] = src[wo * self.stride[2] + dw - self.pad[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient for output frame `to`.
    fn col2im_add<S: Scalar>(&self, col: &[S], to: usize, dx: &mut [S]) {
        let [t, h, w] = self.inp;
        let [kt, kh, kw] = self.ker;
        let [_, ho_n, wo_n] = self.out;
        let plane = ho_n * wo_n;
        let ti0 = (to * self.stride[0]) as isize - self.pad[0] as isize;
        for ci in 0..self.ci {
            for dt in 0..kt {
                let ti = ti0 + dt as isize;
                if ti < 0 || ti as usize >= t {
                    continue;
                }
                let base = (ci * t + ti as usize) * h;
                for dh in 0..kh {
                    let (hlo, hhi) = self.valid(1, dh);
                    for dw in 0..kw {
                        let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                        let src = &col[row * plane..(row + 1) * plane];
                        let (wlo, whi) = self.valid(2, dw);
                        for ho in hlo..hhi {
                            let hi = ho * self.stride[1] + dh - self.pad[1];
                            let dst = &mut dx[(base + hi) * w..(base + hi + 1) * w];
                            let seg = &src[ho * wo_n..(ho + 1) * wo_n];
                            for wo in wlo..whi {
                                dst[wo * self.stride[2] + dw - self.pad[2]] += seg[wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    spec: Conv3dSpec,
) -> Result<(Tensor<S>, ConvGeom), TensorError> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = b {
        if b.shape() != [g.co] {
            return Err(TensorError::Shape(format!(
                "conv3d bias shape {:?}, expected [{}]",
                b.shape(),
                g.co
            )));
        }
    }
    let k = g.k();
    let plane = g.out_plane();
    let frames = g.out[0];
    let n_out = frames * plane;
    let mut out = vec![S::zero(); g.co * n_out];
    if g.pointwise() {
        S::gemm(g.co, k, n_out, S::one(), w.data(), k as isize, 1, x.data(), n_out as isize, 1, S::zero(), &mut out, n_out as isize, 1);
    } else if g.extent_preserving() {
        out = super::direct::forward(x.data(), g.ci, g.inp, w.data(), g.co, g.ker);
    } else {
        let mut col = vec![S::zero(); k * plane];
        for to in 0..frames {
            g.im2col(x.data(), to, &mut col);
            S::gemm(
                g.co,
                k,
                plane,
                S::one(),
                w.data(),
                k as isize,
                1,
                &col,
                plane as isize,
                1,
                S::zero(),
                &mut out[to * plane..],
                n_out as isize,
                1,
            );
        }
    }
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(n_out).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok((Tensor::new(&g.out_shape(), out)?, g))
}

/// Returns (dx, dw, db); `dx`/`dw` only when requested.
pub(crate) fn conv3d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &ConvGeom,
    dy: &[S],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Vec<S>) {
    let k = g.k();
    let plane = g.out_plane();
    let frames = g.out[0];
    let n_out = frames * plane;
    let db: Vec<S> = dy
        .chunks(n_out)
        .map(|c| S::of(c.iter().map(|v| v.f64()).sum::<f64>()))
        .collect();
    let mut dx = need_dx.then(|| vec![S::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![S::zero(); w.numel()]);
    if g.pointwise() {
        if let Some(dw) = dw.as_mut() {
            // dw[Co][Ci] = dy[Co][N] * x[Ci][N]^T
            S::gemm(g.co, n_out, k, S::one(), dy, n_out as isize, 1, x.data(), 1, n_out as isize, S::zero(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            // dx[Ci][N] = w^T[Ci][Co] * dy[Co][N]
            S::gemm(k, g.co, n_out, S::one(), w.data(), 1, k as isize, dy, n_out as isize, 1, S::zero(), dx, n_out as isize, 1);
        }
        return (dx, dw, db);
    }
    if g.extent_preserving() {
        let dw = need_dw.then(|| super::direct::weight_grad(x.data(), g.ci, g.inp, dy, g.co, g.ker));
        let dx = need_dx.then(|| super::direct::input_grad(dy, g.co, g.inp, w.data(), g.ci, g.ker));
        return (dx, dw, db);
    }
    let mut col = vec![S::zero(); k * plane];
    let mut dcol = vec![S::zero(); if need_dx { k * plane } else { 0 }];
    for to in 0..frames {
        let dy_t = &dy[to * plane..];
        if let Some(dw) = dw.as_mut() {
            g.im2col(x.data(), to, &mut col);
            S::gemm(g.co, plane, k, S::one(), dy_t, n_out as isize, 1, &col, 1, plane as isize, S::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            S::gemm(k, g.co, plane, S::one(), w.data(), 1, k as isize, dy_t, n_out as isize, 1, S::zero(), &mut dcol, plane as isize, 1);
            g.col2im_add(&dcol, to, dx);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents_follow_stride_pad_arithmetic() {
        let g = ConvGeom::new(&[2, 5, 9, 8], &[3, 2, 3, 3, 3], Conv3dSpec::down_hw()).unwrap();
        assert_eq!(g.out_shape(), [3, 5, 5, 4]);
        let g = ConvGeom::new(&[2, 5, 9, 8], &[3, 2, 3, 3, 3], Conv3dSpec::same(3)).unwrap();
        assert_eq!(g.out_shape(), [3, 5, 9, 8]);
    }

    #[test]
    fn even_kernels_and_channel_mismatch_are_rejected() {
        assert!(matches!(
            ConvGeom::new(&[2, 4, 4, 4], &[1, 2, 2, 3, 3], Conv3dSpec::same(3)),
            Err(TensorError::Shape(_))
        ));
        assert!(matches!(
            ConvGeom::new(&[3, 4, 4, 4], &[1, 2, 3, 3, 3], Conv3dSpec::same(3)),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn valid_range_brackets_in_bounds_taps() {
        let g = ConvGeom::new(&[1, 1, 7, 7], &[1, 1, 1, 3, 3], Conv3dSpec::down_hw()).unwrap();
        for d in 0..3 {
            let (lo, hi) = g.valid(1, d);
            for o in 0..g.out[1] {
                let i = (o * 2 + d) as isize - 1;
                assert_eq!(o >= lo && o < hi, i >= 0 && i < 7, "d={d} o={o}");
            }
        }
    }
}
