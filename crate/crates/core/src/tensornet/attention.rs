use super::{Tensor, TensorError};
use crate::scalar::Scalar;

pub(crate) struct AttnGeom {
    pub heads: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub dv: usize,
}

pub(crate) fn attn_geom(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnGeom, TensorError> {
    if q.len() != 3 || k.len() != 3 || v.len() != 3 {
        return Err(TensorError::Shape(format!("attention expects rank-3 q/k/v, got {q:?} {k:?} {v:?}")));
    }
    if q[0] != k[0] || k[0] != v[0] {
        return Err(TensorError::Shape(format!("attention head counts differ: {} {} {}", q[0], k[0], v[0])));
    }
    if q[2] != k[2] {
        return Err(TensorError::Shape(format!("attention q/k dims differ: {} vs {}", q[2], k[2])));
    }
    if k[1] != v[1] {
        return Err(TensorError::Shape(format!("attention k/v token counts differ: {} vs {}", k[1], v[1])));
    }
    if k[1] == 0 {
        return Err(TensorError::Shape("attention over zero keys".into()));
    }
    Ok(AttnGeom { heads: q[0], n: q[1], m: k[1], d: q[2], dv: v[2] })
}

/// softmax(q k^T / sqrt(d)) v per head. Returns the output and the attention weights.
pub(crate) fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>), TensorError> {
    let g = attn_geom(q.shape(), k.shape(), v.shape())?;
    let scale = S::of(1.0 / (g.d as f64).sqrt());
    let mut probs = vec![S::zero(); g.heads * g.n * g.m];
    let mut out = vec![S::zero(); g.heads * g.n * g.dv];
    for h in 0..g.heads {
        let qh = &q.data()[h * g.n * g.d..(h + 1) * g.n * g.d];
        let kh = &k.data()[h * g.m * g.d..(h + 1) * g.m * g.d];
        let vh = &v.data()[h * g.m * g.dv..(h + 1) * g.m * g.dv];
        let ph = &mut probs[h * g.n * g.m..(h + 1) * g.n * g.m];
        S::gemm(g.n, g.d, g.m, scale, qh, g.d as isize, 1, kh, 1, g.d as isize, S::zero(), ph, g.m as isize, 1);
        for row in ph.chunks_mut(g.m) {
            let mx = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                sum += e.f64();
            }
            let inv = S::of(1.0 / sum);
            row.iter_mut().for_each(|e| *e *= inv);
        }
        let oh = &mut out[h * g.n * g.dv..(h + 1) * g.n * g.dv];
        S::gemm(g.n, g.m, g.dv, S::one(), ph, g.m as isize, 1, vh, g.dv as isize, 1, S::zero(), oh, g.dv as isize, 1);
    }
    Ok((Tensor::new(&[g.heads, g.n, g.dv], out)?, probs))
}

/// Returns (dq, dk, dv).
pub(crate) fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    probs: &[S],
    dout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let g = attn_geom(q.shape(), k.shape(), v.shape()).expect("validated in forward");
    let scale = S::of(1.0 / (g.d as f64).sqrt());
    let mut dq = vec![S::zero(); q.numel()];
    let mut dk = vec![S::zero(); k.numel()];
    let mut dv = vec![S::zero(); v.numel()];
    let mut dp = vec![S::zero(); g.n * g.m];
    for h in 0..g.heads {
        let qh = &q.data()[h * g.n * g.d..(h + 1) * g.n * g.d];
        let kh = &k.data()[h * g.m * g.d..(h + 1) * g.m * g.d];
        let vh = &v.data()[h * g.m * g.dv..(h + 1) * g.m * g.dv];
        let ph = &probs[h * g.n * g.m..(h + 1) * g.n * g.m];
        let doh = &dout[h * g.n * g.dv..(h + 1) * g.n * g.dv];
        // dV = P^T dO
        S::gemm(g.m, g.n, g.dv, S::one(), ph, 1, g.m as isize, doh, g.dv as isize, 1, S::zero(), &mut dv[h * g.m * g.dv..(h + 1) * g.m * g.dv], g.dv as isize, 1);
        // dP = dO V^T
        S::gemm(g.n, g.dv, g.m, S::one(), doh, g.dv as isize, 1, vh, 1, g.dv as isize, S::zero(), &mut dp, g.m as isize, 1);
        // dS = P * (dP - rowsum(dP * P))
        for (prow, drow) in ph.chunks(g.m).zip(dp.chunks_mut(g.m)) {
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, d)| p.f64() * d.f64()).sum();
            let dot = S::of(dot);
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot);
            }
        }
        S::gemm(g.n, g.m, g.d, scale, &dp, g.m as isize, 1, kh, g.d as isize, 1, S::zero(), &mut dq[h * g.n * g.d..(h + 1) * g.n * g.d], g.d as isize, 1);
        S::gemm(g.m, g.n, g.d, scale, &dp, 1, g.m as isize, qh, g.d as isize, 1, S::zero(), &mut dk[h * g.m * g.d..(h + 1) * g.m * g.d], g.d as isize, 1);
    }
    (dq, dk, dv)
}
