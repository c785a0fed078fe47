use super::{Tensor, TensorError};
use crate::scalar::Scalar;

pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check<S: Scalar>(x: &Tensor<S>, groups: usize, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<(usize, usize), TensorError> {
    let c = *x.shape().first().ok_or_else(|| TensorError::Shape("group_norm on rank-0 tensor".into()))?;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::Config(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape(format!(
            "group_norm affine shapes {:?}/{:?}, expected [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((c, x.numel() / c))
}

pub(crate) fn group_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    groups: usize,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, GroupStats), TensorError> {
    let (c, per_ch) = check(x, groups, gamma, beta)?;
    let cpg = c / groups;
    let gsize = cpg * per_ch;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    let mut out = vec![S::zero(); x.numel()];
    for (g, chunk) in x.data().chunks(gsize).enumerate() {
        let m = chunk.iter().map(|v| v.f64()).sum::<f64>() / gsize as f64;
        let var = chunk.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / gsize as f64;
        let r = 1.0 / (var + eps).sqrt();
        mean.push(m);
        rstd.push(r);
        for ch in 0..cpg {
            let cc = g * cpg + ch;
            let (ga, be) = (gamma.data()[cc].f64(), beta.data()[cc].f64());
            let src = &chunk[ch * per_ch..(ch + 1) * per_ch];
            let dst = &mut out[cc * per_ch..(cc + 1) * per_ch];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = S::of((v.f64() - m) * r * ga + be);
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, GroupStats { mean, rstd }))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn group_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    stats: &GroupStats,
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let c = x.shape()[0];
    let groups = stats.mean.len();
    let cpg = c / groups;
    let per_ch = x.numel() / c;
    let n = (cpg * per_ch) as f64;
    let mut dx = vec![S::zero(); x.numel()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for g in 0..groups {
        let (m, r) = (stats.mean[g], stats.rstd[g]);
        // sums of dxhat and dxhat * xhat over the group
        let (mut s1, mut s2) = (0.0, 0.0);
        for ch in 0..cpg {
            let cc = g * cpg + ch;
            let ga = gamma.data()[cc].f64();
            let (mut dg, mut db) = (0.0, 0.0);
            for i in cc * per_ch..(cc + 1) * per_ch {
                let xh = (x.data()[i].f64() - m) * r;
                let d = dy[i].f64();
                dg += d * xh;
                db += d;
                s1 += d * ga;
                s2 += d * ga * xh;
            }
            dgamma[cc] = S::of(dg);
            dbeta[cc] = S::of(db);
        }
        let (mean_d, mean_dx) = (s1 / n, s2 / n);
        for ch in 0..cpg {
            let cc = g * cpg + ch;
            let ga = gamma.data()[cc].f64();
            for i in cc * per_ch..(cc + 1) * per_ch {
                let xh = (x.data()[i].f64() - m) * r;
                dx[i] = S::of(r * (dy[i].f64() * ga - mean_d - xh * mean_dx));
            }
        }
    }
    (dx, dgamma, dbeta)
}
