//! Tape-based reverse-mode differentiation.

use super::attention::{attention_backward, attention_forward};
use super::conv::{conv3d_backward, conv3d_forward, Conv3dSpec, ConvGeom};
use super::norm::{group_norm_backward, group_norm_forward, GroupStats};
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddChannel(Var, Var),
    Silu(Var),
    Sum(Var),
    Mse(Var, Var),
    Concat(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Upsample2x(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNormAffine { x: Var, gamma: Var, beta: Var, stats: GroupStats },
    Attention { q: Var, k: Var, v: Var, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in execution order; [`Graph::backward`] walks them in
/// reverse and accumulates gradients additively.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    tracked: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), tracked: 0 }
    }

    /// True once any recorded node requires a gradient.
    pub fn tracks_grad(&self) -> bool {
        self.tracked > 0
    }

    /// Inference only: drops the values of every computed node except `keep`.
    /// Returns false (and frees nothing) when the graph tracks gradients.
    pub fn release_except(&mut self, keep: &[Var]) -> bool {
        if self.tracks_grad() {
            return false;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) || keep.iter().any(|v| v.0 == i) {
                continue;
            }
            node.op = Op::Leaf;
            node.value = Tensor::zeros(&[0]);
        }
        true
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.tracked += requires_grad as usize;
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads[v.0].take()
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `x[c, ...] + v[c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let c = xs[0];
        if self.shape(v) != [c] {
            return Err(TensorError::Shape(format!("add_channel: {:?} vs {:?}", self.shape(v), xs)));
        }
        let per = self.value(x).numel() / c;
        let mut value = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (ch, chunk) in value.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|e| *e += vd[ch]);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, Op::AddChannel(x, v), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::of(s)), Op::Sum(x), rg)
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape(format!("mse shapes differ: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(S::of(s / n)), Op::Mse(a, b), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(TensorError::Shape(format!("concat: incompatible {sa:?} and {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let value = permute_tensor(self.value(x), axes)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Nearest-neighbour doubling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::Shape(format!("upsample2x needs rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead = t.numel() / (h * w).max(1);
        let mut out = vec![S::zero(); lead * 4 * h * w];
        for p in 0..lead {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample2x(x), rg))
    }

    /// `x [n][in] * w[out][in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::Shape(format!("linear: x {xs:?} incompatible with w {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * fout];
        S::gemm(n, fin, fout, S::one(), self.value(x).data(), fin as isize, 1, self.value(w).data(), 1, fin as isize, S::zero(), &mut out, fout as isize, 1);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(TensorError::Shape(format!("linear bias {:?}, expected [{fout}]", self.shape(b))));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var, TensorError> {
        let (value, geom) = conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Group normalisation over `[C][...]` followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (value, stats) = group_norm_forward(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::GroupNormAffine { x, gamma, beta, stats }, rg))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (value, probs) = attention_forward(self.value(q), self.value(k), self.value(v))?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, Op::Attention { q, k, v, probs }, rg))
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of the one-element `loss` with respect to every
    /// differentiable node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.backward_node(i, dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: Vec<S>) {
        // Contributions are computed against immutable node data, then accumulated.
        let mut out: Vec<(Var, Vec<S>)> = Vec::new();
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    out.push((*a, dy.clone()));
                    out.push((*b, dy));
                }
                Op::Sub(a, b) => {
                    out.push((*b, dy.iter().map(|&d| -d).collect()));
                    out.push((*a, dy));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if rg(*a) {
                        out.push((*a, dy.iter().zip(vb).map(|(&d, &y)| d * y).collect()));
                    }
                    if rg(*b) {
                        out.push((*b, dy.iter().zip(va).map(|(&d, &x)| d * x).collect()));
                    }
                }
                Op::Scale(a, s) => out.push((*a, dy.iter().map(|&d| d * *s).collect())),
                Op::AddChannel(x, v) => {
                    let c = val(*v).numel();
                    let per = dy.len() / c;
                    if rg(*v) {
                        let dv = dy.chunks(per).map(|ch| S::of(ch.iter().map(|e| e.f64()).sum::<f64>())).collect();
                        out.push((*v, dv));
                    }
                    out.push((*x, dy));
                }
                Op::Silu(x) => {
                    let g = dy
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&d, &x)| {
                            let s = sigmoid(x);
                            d * s * (S::one() + x * (S::one() - s))
                        })
                        .collect();
                    out.push((*x, g));
                }
                Op::Sum(x) => out.push((*x, vec![dy[0]; val(*x).numel()])),
                Op::Mse(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let k = dy[0].f64() * 2.0 / va.len().max(1) as f64;
                    let ga: Vec<S> = va.iter().zip(vb).map(|(&x, &y)| S::of(k * (x.f64() - y.f64()))).collect();
                    if rg(*b) {
                        out.push((*b, ga.iter().map(|&g| -g).collect()));
                    }
                    out.push((*a, ga));
                }
                Op::Concat(a, b) => {
                    let na = val(*a).numel();
                    out.push((*a, dy[..na].to_vec()));
                    out.push((*b, dy[na..].to_vec()));
                }
                Op::Reshape(x) => out.push((*x, dy)),
                Op::Permute(x, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let gt = Tensor::new(node.value.shape(), dy).expect("grad matches value shape");
                    out.push((*x, permute_tensor(&gt, &inv).expect("inverse permutation").into_data()));
                }
                Op::Upsample2x(x) => {
                    let s = val(*x).shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let lead = val(*x).numel() / (h * w).max(1);
                    let mut g = vec![S::zero(); val(*x).numel()];
                    for p in 0..lead {
                        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                            }
                        }
                    }
                    out.push((*x, g));
                }
                Op::Linear { x, w, b } => {
                    let (xs, ws) = (val(*x).shape(), val(*w).shape());
                    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                    if rg(*x) {
                        let mut dx = vec![S::zero(); n * fin];
                        S::gemm(n, fout, fin, S::one(), &dy, fout as isize, 1, val(*w).data(), fin as isize, 1, S::zero(), &mut dx, fin as isize, 1);
                        out.push((*x, dx));
                    }
                    if rg(*w) {
                        let mut dw = vec![S::zero(); fout * fin];
                        S::gemm(fout, n, fin, S::one(), &dy, 1, fout as isize, val(*x).data(), fin as isize, 1, S::zero(), &mut dw, fin as isize, 1);
                        out.push((*w, dw));
                    }
                    if let Some(b) = b {
                        let mut db = vec![0.0f64; fout];
                        for row in dy.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, &d)| *a += d.f64());
                        }
                        out.push((*b, db.into_iter().map(S::of).collect()));
                    }
                }
                Op::Conv3d { x, w, b, geom } => {
                    let (dx, dw, db) = conv3d_backward(val(*x), val(*w), geom, &dy, rg(*x), rg(*w));
                    if let Some(dx) = dx {
                        out.push((*x, dx));
                    }
                    if let Some(dw) = dw {
                        out.push((*w, dw));
                    }
                    if let Some(b) = b {
                        out.push((*b, db));
                    }
                }
                Op::GroupNormAffine { x, gamma, beta, stats } => {
                    let (dx, dg, db) = group_norm_backward(val(*x), val(*gamma), stats, &dy);
                    out.push((*x, dx));
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), probs, &dy);
                    out.push((*q, dq));
                    out.push((*k, dk));
                    out.push((*v, dv));
                }
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
    }
}

pub(crate) fn permute_tensor<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>, TensorError> {
    let s = t.shape();
    let r = s.len();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Shape(format!("invalid permutation {axes:?} for rank {r}")));
    }
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data()[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}
