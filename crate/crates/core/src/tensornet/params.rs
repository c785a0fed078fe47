use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Vec<S>>,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad: None });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<S>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound(self.params.iter().map(|p| g.param(p.value.clone())).collect())
    }

    /// Records every parameter as a constant (inference, frozen networks).
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Bound {
        Bound(self.params.iter().map(|p| g.input(p.value.clone())).collect())
    }

    /// Moves gradients from the graph into `Param::grad`. Parameters the loss
    /// does not depend on receive an explicit zero gradient.
    pub fn collect_grads(&mut self, g: &mut Graph<S>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            p.grad = Some(g.take_grad(v).unwrap_or_else(|| vec![S::zero(); p.value.numel()]));
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Exponential moving average `self <- decay * self + (1 - decay) * src`.
    pub fn ema_from(&mut self, src: &ParamSet<S>, decay: f64) -> Result<(), TensorError> {
        if self.params.len() != src.params.len() {
            return Err(TensorError::Shape("EMA parameter sets differ in length".into()));
        }
        let (d, e) = (S::of(decay), S::of(1.0 - decay));
        for (t, s) in self.params.iter_mut().zip(&src.params) {
            if t.value.shape() != s.value.shape() {
                return Err(TensorError::Shape(format!("EMA shape mismatch for {}", t.name)));
            }
            for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                *a = d * *a + e * b;
            }
        }
        Ok(())
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_from(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<(), TensorError> {
        if entries.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, t) in entries {
            let &i = self
                .index
                .get(name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unexpected tensor {name}")))?;
            let p = &mut self.params[i];
            if p.value.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }
}

/// Graph handles of a bound [`ParamSet`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Truncated normal (two standard deviations) with `std = 1/sqrt(fan_in)`.
pub fn init_trunc_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break S::of(z * std);
        }
    })
}
