//! Minimal reverse-mode tensor core: exactly the layers the denoiser needs,
//! the AdamW optimizer and the checkpoint format.

mod attention;
mod checkpoint;
mod conv;
mod direct;
mod graph;
mod norm;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use conv::Conv3dSpec;
pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use params::{init_trunc_normal, Bound, Param, ParamId, ParamSet};
pub use tensor::Tensor;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Standalone convolution (no gradient tracking).
pub fn conv3d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>, spec: Conv3dSpec) -> Result<Tensor<S>, TensorError> {
    conv::conv3d_forward(x, w, b, spec).map(|(t, _)| t)
}

/// Standalone group normalisation (no gradient tracking).
pub fn group_norm<S: Scalar>(x: &Tensor<S>, groups: usize, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>, TensorError> {
    norm::group_norm_forward(x, groups, gamma, beta, eps).map(|(t, _)| t)
}

/// Standalone scaled dot-product attention over `[heads][tokens][dim]`.
pub fn attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    attention::attention_forward(q, k, v).map(|(t, _)| t)
}

pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>, TensorError> {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v * graph::sigmoid(v))
}

/// Sinusoidal embedding of a diffusion step: entry `2i` is `sin(k w_i)`,
/// entry `2i+1` is `cos(k w_i)`, with `w_i = 10000^(-i/(dim/2))`.
pub fn timestep_embedding<S: Scalar>(k: usize, dim: usize) -> Result<Tensor<S>, TensorError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TensorError::Config(format!("timestep embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = k as f64 * w;
        data.push(S::of(a.sin()));
        data.push(S::of(a.cos()));
    }
    Tensor::new(&[dim], data)
}
