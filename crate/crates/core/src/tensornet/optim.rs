use super::{ParamSet, TensorError};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state saved alongside a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<(), TensorError> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::Shape("optimizer moments disagree in shape".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update using the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<(), TensorError> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::Usage(format!("adamw step: parameter {} has no gradient", p.name)));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.value.numel()) {
            return Err(TensorError::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = S::of(1.0 - self.lr * self.weight_decay);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (ob1, ob2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let step_size = S::of(self.lr / bc1);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        let eps = S::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above");
            for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *theta = *theta * decay - step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
