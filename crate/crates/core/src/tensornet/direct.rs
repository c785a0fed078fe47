//! Direct kernels for unit-stride, extent-preserving 3D convolutions.
//!
//! The input is zero-padded once; every kernel tap then reads a contiguous run
//! of the padded plane, so no im2col buffer is needed. Outputs are computed on
//! the padded row pitch and the pad columns are dropped on write-back.

use std::any::TypeId;

use crate::scalar::Scalar;

// Slack past the padded volume so the widest position tile may overrun.
const SLACK: usize = 64;

struct Layout {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    tp: usize,
    wp: usize,
    plane: usize,
    /// Positions covered per frame on the padded pitch.
    n: usize,
    /// Offset of each tap (ci, dt, dh, dw) relative to the frame base.
    offsets: Vec<usize>,
}

impl Layout {
    fn new(ci: usize, dims: [usize; 3], ker: [usize; 3]) -> Self {
        let [t, h, w] = dims;
        let [kt, kh, kw] = ker;
        let (tp, hp, wp) = (t + kt - 1, h + kh - 1, w + kw - 1);
        let plane = hp * wp;
        let n = (h - 1) * wp + w;
        let mut offsets = Vec::with_capacity(ci * kt * kh * kw);
        for c in 0..ci {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        offsets.push((c * tp + dt) * plane + dh * wp + dw);
                    }
                }
            }
        }
        Self { ci, t, h, w, tp, wp, plane, n, offsets }
    }

    /// Zero-padded copy of `x` ([Ci][T][H][W]) with slack for tile overrun.
    fn pad<S: Scalar>(&self, x: &[S], ker: [usize; 3]) -> Vec<S> {
        let (pt, ph, pw) = (ker[0] / 2, ker[1] / 2, ker[2] / 2);
        let mut xp = vec![S::zero(); self.ci * self.tp * self.plane + SLACK];
        for c in 0..self.ci {
            for ti in 0..self.t {
                for hi in 0..self.h {
                    let src = &x[((c * self.t + ti) * self.h + hi) * self.w..][..self.w];
                    let dst = ((c * self.tp + ti + pt) * self.plane) + (hi + ph) * self.wp + pw;
                    xp[dst..dst + self.w].copy_from_slice(src);
                }
            }
        }
        xp
    }

    /// Copies a padded-pitch row of results for output channel `o`, frame `to`.
    fn scatter<S: Scalar>(&self, out: &mut [S], o: usize, to: usize, p0: usize, vals: &[S]) {
        let obase = (o * self.t + to) * self.h * self.w;
        for (j, &v) in vals.iter().enumerate() {
            let p = p0 + j;
            if p >= self.n {
                break;
            }
            let (hh, ww) = (p / self.wp, p % self.wp);
            if ww < self.w {
                out[obase + hh * self.w + ww] = v;
            }
        }
    }

    /// `dy` frame `to` for channels `o0..o0+rows` on the padded pitch, pad columns zero.
    fn gather_rows<S: Scalar>(&self, dy: &[S], o0: usize, co: usize, to: usize, stride: usize, dst: &mut [S]) {
        dst.fill(S::zero());
        for (c, row) in dst.chunks_mut(stride).enumerate() {
            let o = o0 + c;
            if o >= co {
                break;
            }
            for hh in 0..self.h {
                let src = &dy[((o * self.t + to) * self.h + hh) * self.w..][..self.w];
                row[hh * self.wp..][..self.w].copy_from_slice(src);
            }
        }
    }
}

/// Forward pass: `w` is [Co][Ci][kT][kH][kW], `x` is [Ci][T][H][W].
pub(crate) fn forward<S: Scalar>(x: &[S], ci: usize, dims: [usize; 3], w: &[S], co: usize, ker: [usize; 3]) -> Vec<S> {
    let lay = Layout::new(ci, dims, ker);
    let xp = lay.pad(x, ker);
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if TypeId::of::<S>() == TypeId::of::<f32>() && has!("avx512f") {
            let (xp, w) = (as_f32(&xp), as_f32(w));
            // SAFETY: avx512f was detected at runtime.
            let out = unsafe { avx512::forward(&lay, xp, w, co) };
            return from_f32(out);
        }
        if has!("avx2") {
            // SAFETY: avx2 was detected at runtime.
            return unsafe { forward_avx2(&lay, &xp, w, co) };
        }
    }
    forward_generic(&lay, &xp, w, co)
}

/// Weight gradient: `dy` is [Co][T][H][W]; returns [Co][Ci][kT][kH][kW].
pub(crate) fn weight_grad<S: Scalar>(x: &[S], ci: usize, dims: [usize; 3], dy: &[S], co: usize, ker: [usize; 3]) -> Vec<S> {
    let lay = Layout::new(ci, dims, ker);
    let xp = lay.pad(x, ker);
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if TypeId::of::<S>() == TypeId::of::<f32>() && has!("avx512f") {
            let (xp, dy) = (as_f32(&xp), as_f32(dy));
            // SAFETY: avx512f was detected at runtime.
            let dw = unsafe { avx512::weight_grad(&lay, xp, dy, co) };
            return from_f32(dw);
        }
        if has!("avx2") {
            // SAFETY: avx2 was detected at runtime.
            return unsafe { weight_grad_avx2(&lay, &xp, dy, co) };
        }
    }
    weight_grad_generic(&lay, &xp, dy, co)
}

/// Input gradient: correlation of `dy` with the channel-swapped, flipped kernel.
pub(crate) fn input_grad<S: Scalar>(dy: &[S], co: usize, dims: [usize; 3], w: &[S], ci: usize, ker: [usize; 3]) -> Vec<S> {
    let taps = ker[0] * ker[1] * ker[2];
    let mut wt = vec![S::zero(); w.len()];
    for o in 0..co {
        for i in 0..ci {
            let src = &w[(o * ci + i) * taps..][..taps];
            let dst = &mut wt[(i * co + o) * taps..][..taps];
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    forward(dy, co, dims, &wt, ci, ker)
}

fn as_f32<S: Scalar>(v: &[S]) -> &[f32] {
    assert_eq!(TypeId::of::<S>(), TypeId::of::<f32>());
    // SAFETY: S is f32, checked above.
    unsafe { std::slice::from_raw_parts(v.as_ptr() as *const f32, v.len()) }
}

fn from_f32<S: Scalar>(v: Vec<f32>) -> Vec<S> {
    assert_eq!(TypeId::of::<S>(), TypeId::of::<f32>());
    let mut v = std::mem::ManuallyDrop::new(v);
    // SAFETY: S is f32, checked above; the allocation is handed over unchanged.
    unsafe { Vec::from_raw_parts(v.as_mut_ptr() as *mut S, v.len(), v.capacity()) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_avx2<S: Scalar>(lay: &Layout, xp: &[S], w: &[S], co: usize) -> Vec<S> {
    forward_generic(lay, xp, w, co)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_avx2<S: Scalar>(lay: &Layout, xp: &[S], dy: &[S], co: usize) -> Vec<S> {
    weight_grad_generic(lay, xp, dy, co)
}

/// Weights regrouped as [block][tap][cb], zero-filled past `co`.
fn pack_weights<S: Scalar>(w: &[S], co: usize, kk: usize, cb: usize) -> Vec<S> {
    let blocks = co.div_ceil(cb);
    let mut wp = vec![S::zero(); blocks * kk * cb];
    for o in 0..co {
        let (b, c) = (o / cb, o % cb);
        for k in 0..kk {
            wp[(b * kk + k) * cb + c] = w[o * kk + k];
        }
    }
    wp
}

// Tile shapes below are the ones the auto-vectorizer keeps in registers.
#[inline(always)]
fn forward_generic<S: Scalar>(lay: &Layout, xp: &[S], w: &[S], co: usize) -> Vec<S> {
    const CB: usize = 4;
    const NB: usize = 16;
    let kk = lay.offsets.len();
    let n_pad = lay.n.div_ceil(NB) * NB;
    let wp = pack_weights(w, co, kk, CB);
    let mut out = vec![S::zero(); co * lay.t * lay.h * lay.w];
    for to in 0..lay.t {
        let fbase = to * lay.plane;
        for b in 0..co.div_ceil(CB) {
            let wblk = &wp[b * kk * CB..(b + 1) * kk * CB];
            for p0 in (0..n_pad).step_by(NB) {
                let mut acc = [[S::zero(); NB]; CB];
                for (k, &off) in lay.offsets.iter().enumerate() {
                    let s: &[S; NB] = xp[fbase + off + p0..][..NB].try_into().unwrap();
                    let wv: &[S; CB] = wblk[k * CB..][..CB].try_into().unwrap();
                    for c in 0..CB {
                        for j in 0..NB {
                            acc[c][j] += wv[c] * s[j];
                        }
                    }
                }
                for (c, row) in acc.iter().enumerate().take(co - b * CB) {
                    lay.scatter(&mut out, b * CB + c, to, p0, row);
                }
            }
        }
    }
    out
}

#[inline(always)]
fn weight_grad_generic<S: Scalar>(lay: &Layout, xp: &[S], dy: &[S], co: usize) -> Vec<S> {
    const CB: usize = 4;
    const LANES: usize = 8;
    const TILE: usize = 512;
    let kk = lay.offsets.len();
    let n_pad = lay.n.div_ceil(LANES) * LANES;
    let mut dw = vec![S::zero(); co * kk];
    let mut dyp = vec![S::zero(); CB * n_pad];
    for to in 0..lay.t {
        let fbase = to * lay.plane;
        for b in 0..co.div_ceil(CB) {
            lay.gather_rows(dy, b * CB, co, to, n_pad, &mut dyp);
            for p0 in (0..n_pad).step_by(TILE) {
                let p1 = (p0 + TILE).min(n_pad);
                for (k, &off) in lay.offsets.iter().enumerate() {
                    let mut acc = [[S::zero(); LANES]; CB];
                    let base = fbase + off;
                    for p in (p0..p1).step_by(LANES) {
                        let s: &[S; LANES] = xp[base + p..][..LANES].try_into().unwrap();
                        for c in 0..CB {
                            let d: &[S; LANES] = dyp[c * n_pad + p..][..LANES].try_into().unwrap();
                            for j in 0..LANES {
                                acc[c][j] += d[j] * s[j];
                            }
                        }
                    }
                    for (c, lanes) in acc.iter().enumerate().take(co - b * CB) {
                        let mut sum = S::zero();
                        for &v in lanes {
                            sum += v;
                        }
                        dw[(b * CB + c) * kk + k] += sum;
                    }
                }
            }
        }
    }
    dw
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{pack_weights, Layout, SLACK};
    use std::arch::x86_64::*;

    const CB: usize = 8;
    const NB: usize = 32;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward(lay: &Layout, xp: &[f32], w: &[f32], co: usize) -> Vec<f32> {
        let kk = lay.offsets.len();
        let n_pad = lay.n.div_ceil(NB) * NB;
        assert!(n_pad - lay.n <= SLACK);
        let last = (lay.t - 1) * lay.plane + lay.offsets.iter().max().copied().unwrap_or(0) + n_pad;
        assert!(last <= xp.len());
        let wp = pack_weights(w, co, kk, CB);
        let mut out = vec![0.0f32; co * lay.t * lay.h * lay.w];
        let mut tmp = [[0.0f32; NB]; CB];
        for to in 0..lay.t {
            let fbase = to * lay.plane;
            for b in 0..co.div_ceil(CB) {
                let wblk = wp.as_ptr().add(b * kk * CB);
                for p0 in (0..n_pad).step_by(NB) {
                    let mut acc = [_mm512_setzero_ps(); 2 * CB];
                    let src = xp.as_ptr().add(fbase + p0);
                    for (k, &off) in lay.offsets.iter().enumerate() {
                        let s0 = _mm512_loadu_ps(src.add(off));
                        let s1 = _mm512_loadu_ps(src.add(off + 16));
                        let wk = wblk.add(k * CB);
                        for c in 0..CB {
                            let wv = _mm512_set1_ps(*wk.add(c));
                            acc[2 * c] = _mm512_fmadd_ps(wv, s0, acc[2 * c]);
                            acc[2 * c + 1] = _mm512_fmadd_ps(wv, s1, acc[2 * c + 1]);
                        }
                    }
                    for c in 0..CB {
                        _mm512_storeu_ps(tmp[c].as_mut_ptr(), acc[2 * c]);
                        _mm512_storeu_ps(tmp[c].as_mut_ptr().add(16), acc[2 * c + 1]);
                    }
                    for (c, row) in tmp.iter().enumerate().take(co - b * CB) {
                        lay.scatter(&mut out, b * CB + c, to, p0, row);
                    }
                }
            }
        }
        out
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn weight_grad(lay: &Layout, xp: &[f32], dy: &[f32], co: usize) -> Vec<f32> {
        const TILE: usize = 512;
        let kk = lay.offsets.len();
        let n_pad = lay.n.div_ceil(16) * 16;
        let last = (lay.t - 1) * lay.plane + lay.offsets.iter().max().copied().unwrap_or(0) + n_pad;
        assert!(last <= xp.len());
        let mut dw = vec![0.0f32; co * kk];
        let mut dyp = vec![0.0f32; CB * n_pad];
        for to in 0..lay.t {
            let fbase = to * lay.plane;
            for b in 0..co.div_ceil(CB) {
                lay.gather_rows(dy, b * CB, co, to, n_pad, &mut dyp);
                let rows = (co - b * CB).min(CB);
                for p0 in (0..n_pad).step_by(TILE) {
                    let p1 = (p0 + TILE).min(n_pad);
                    // taps in pairs so each dy load feeds two accumulators
                    let mut k = 0;
                    while k < kk {
                        let pair = k + 1 < kk;
                        let src0 = xp.as_ptr().add(fbase + lay.offsets[k]);
                        let src1 = if pair { xp.as_ptr().add(fbase + lay.offsets[k + 1]) } else { src0 };
                        let mut acc0 = [_mm512_setzero_ps(); CB];
                        let mut acc1 = [_mm512_setzero_ps(); CB];
                        for p in (p0..p1).step_by(16) {
                            let s0 = _mm512_loadu_ps(src0.add(p));
                            let s1 = _mm512_loadu_ps(src1.add(p));
                            for c in 0..CB {
                                let d = _mm512_loadu_ps(dyp.as_ptr().add(c * n_pad + p));
                                acc0[c] = _mm512_fmadd_ps(d, s0, acc0[c]);
                                acc1[c] = _mm512_fmadd_ps(d, s1, acc1[c]);
                            }
                        }
                        for c in 0..rows {
                            dw[(b * CB + c) * kk + k] += _mm512_reduce_add_ps(acc0[c]);
                            if pair {
                                dw[(b * CB + c) * kk + k + 1] += _mm512_reduce_add_ps(acc1[c]);
                            }
                        }
                        k += 2;
                    }
                }
            }
        }
        dw
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], ci: usize, dims: [usize; 3], w: &[f64], co: usize, ker: [usize; 3]) -> Vec<f64> {
        let [t, h, wd] = dims;
        let [kt, kh, kw] = ker;
        let mut out = vec![0.0; co * t * h * wd];
        for o in 0..co {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..wd {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for a in 0..kt {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let (tt, hh, ww) = (
                                            ti as isize + a as isize - (kt / 2) as isize,
                                            hi as isize + bb as isize - (kh / 2) as isize,
                                            wi as isize + e as isize - (kw / 2) as isize,
                                        );
                                        if tt < 0 || hh < 0 || ww < 0 || tt >= t as isize || hh >= h as isize || ww >= wd as isize {
                                            continue;
                                        }
                                        let xv = x[((c * t + tt as usize) * h + hh as usize) * wd + ww as usize];
                                        s += w[((((o * ci + c) * kt + a) * kh) + bb) * kw + e] * xv;
                                    }
                                }
                            }
                        }
                        out[((o * t + ti) * h + hi) * wd + wi] = s;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn forward_and_gradients_match_naive_loops() {
        for &(ci, co, dims, ker) in &[
            (2usize, 5usize, [3usize, 5usize, 7usize], [3usize, 3usize, 3usize]),
            (3, 1, [1, 4, 4], [1, 3, 3]),
            (1, 6, [4, 3, 9], [3, 1, 5]),
            (9, 11, [2, 13, 21], [3, 3, 3]),
        ] {
            let x = seq(ci * dims.iter().product::<usize>(), 1);
            let w = seq(co * ci * ker.iter().product::<usize>(), 2);
            let y = forward(&x, ci, dims, &w, co, ker);
            let yr = naive(&x, ci, dims, &w, co, ker);
            for (a, b) in y.iter().zip(&yr) {
                assert!((a - b).abs() < 1e-12);
            }
            // <dy, conv(x)> is bilinear: check both gradients by inner products
            let dy = seq(y.len(), 3);
            let dwv = weight_grad(&x, ci, dims, &dy, co, ker);
            let dxv = input_grad(&dy, co, dims, &w, ci, ker);
            let inner = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let base = inner(&dy, &yr);
            assert!((inner(&dwv, &w) - base).abs() < 1e-9);
            assert!((inner(&dxv, &x) - base).abs() < 1e-9);
            let f = |v: &[f64]| v.iter().map(|&e| e as f32).collect::<Vec<f32>>();
            let y32 = forward(&f(&x), ci, dims, &f(&w), co, ker);
            let dw32 = weight_grad(&f(&x), ci, dims, &f(&dy), co, ker);
            let dx32 = input_grad(&f(&dy), co, dims, &f(&w), ci, ker);
            for (a, b) in y32.iter().zip(&yr).chain(dw32.iter().zip(&dwv)).chain(dx32.iter().zip(&dxv)) {
                assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
            }
            for i in 0..w.len() {
                let mut e = vec![0.0; w.len()];
                e[i] = 1.0;
                let expect = inner(&dy, &naive(&x, ci, dims, &e, co, ker));
                assert!((dwv[i] - expect).abs() < 1e-9);
            }
        }
    }
}
