//! Noise schedule, epsilon-prediction training, consistency distillation and
//! the few-step consistency sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::denoiser::Denoiser;
use crate::scalar::Scalar;
use crate::tensornet::{AdamW, Graph, Tensor, TensorError, Var};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const SAMPLER_STEPS: [usize; 4] = [4, 8, 25, 50];

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Scaled-linear β schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(k: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if k < 2 {
            return Err(DiffusionError::Param(format!("need at least 2 timesteps, got {k}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Param(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let beta: Vec<f64> = (0..k)
            .map(|i| {
                let s = a + (i as f64 / (k - 1) as f64) * (b - a);
                s * s
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut prod = 1.0;
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .map(|a| {
                prod *= a;
                prod
            })
            .collect();
        if prod < f64::MIN_POSITIVE {
            return Err(DiffusionError::Param(format!(
                "cumulative signal fraction underflows for K = {k}, beta in [{beta_start}, {beta_end}]"
            )));
        }
        Ok(Self { beta_start, beta_end, beta, alpha, alpha_bar })
    }

    pub fn default_schedule() -> Self {
        Self::new(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, k: usize) -> Result<(), DiffusionError> {
        if k >= self.len() {
            return Err(DiffusionError::Range(format!("timestep {k} outside 0..{}", self.len())));
        }
        Ok(())
    }

    /// (√ᾱ_k, √(1−ᾱ_k))
    pub fn coefficients(&self, k: usize) -> (f64, f64) {
        let ab = self.alpha_bar[k];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// z_k = √ᾱ_k·x + √(1−ᾱ_k)·ε
pub fn add_noise<S: Scalar>(x: &Tensor<S>, k: usize, eps: &Tensor<S>, s: &NoiseSchedule) -> Result<Tensor<S>, DiffusionError> {
    s.check(k)?;
    let (a, b) = s.coefficients(k);
    let (a, b) = (S::of(a), S::of(b));
    Ok(x.zip_map(eps, |x, e| a * x + b * e)?)
}

/// One epsilon-prediction step on a single (x, cond) example; returns the loss.
pub fn train_step<S: Scalar, R: Rng + ?Sized>(
    d: &mut Denoiser<S>,
    opt: &mut AdamW<S>,
    x: &Tensor<S>,
    cond: &Tensor<S>,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    let k = rng.gen_range(0..s.len());
    let eps = Tensor::<S>::randn(x.shape(), rng);
    let z = add_noise(x, k, &eps, s)?;
    let mut g = Graph::new();
    let p = d.params.bind(&mut g);
    let zv = g.input(z);
    let pred = d.forward(&mut g, &p, zv, k, cond)?;
    let target = g.input(eps);
    let loss_v = g.mse(pred, target)?;
    let loss = g.value(loss_v).item()?.f64();
    if !loss.is_finite() {
        return Err(DiffusionError::Divergence(format!(
            "non-finite loss {loss} at optimizer step {} (timestep {k})",
            opt.steps_taken() + 1
        )));
    }
    g.backward(loss_v)?;
    d.params.collect_grads(&mut g, &p);
    opt.step(&mut d.params)?;
    d.params.zero_grad();
    Ok(loss)
}

/// Epsilon-prediction loss at a fixed timestep and noise draw, without updates.
pub fn eval_loss<S: Scalar>(
    d: &Denoiser<S>,
    x: &Tensor<S>,
    cond: &Tensor<S>,
    k: usize,
    eps: &Tensor<S>,
    s: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    let z = add_noise(x, k, eps, s)?;
    let pred = d.predict(&z, k, cond)?;
    let n = pred.numel() as f64;
    Ok(pred.data().iter().zip(eps.data()).map(|(p, e)| (p.f64() - e.f64()).powi(2)).sum::<f64>() / n)
}

/// Boundary-satisfying consistency coefficients with k_s = scale·k.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyParam {
    pub sigma_data: f64,
    pub timestep_scale: f64,
}

impl Default for ConsistencyParam {
    fn default() -> Self {
        Self { sigma_data: 0.5, timestep_scale: 10.0 }
    }
}

impl ConsistencyParam {
    /// Unit-interval timestep scaling, k_s = k / K.
    pub fn unit_interval(k: usize) -> Self {
        Self { sigma_data: 0.5, timestep_scale: 1.0 / k as f64 }
    }

    /// (c_skip, c_out) at timestep `k`.
    pub fn coefficients(&self, k: usize) -> (f64, f64) {
        let ks = self.timestep_scale * k as f64;
        let sd2 = self.sigma_data * self.sigma_data;
        let c_skip = sd2 / (ks * ks + sd2);
        let c_out = self.sigma_data * ks / (ks * ks + sd2).sqrt();
        (c_skip, c_out)
    }

    /// f = c_skip·z + c_out·F with F = x̂₀/σ_d and x̂₀ = (z − √(1−ᾱ)·ε̂)/√ᾱ,
    /// written as a·z + b·ε̂.
    fn affine(&self, k: usize, s: &NoiseSchedule) -> (f64, f64) {
        let (c_skip, c_out) = self.coefficients(k);
        let (sa, sb) = s.coefficients(k);
        let w = c_out / self.sigma_data;
        (c_skip + w / sa, -w * sb / sa)
    }

    /// Consistency function output from a noise prediction.
    pub fn apply<S: Scalar>(&self, z: &Tensor<S>, eps_hat: &Tensor<S>, k: usize, s: &NoiseSchedule) -> Result<Tensor<S>, DiffusionError> {
        let (a, b) = self.affine(k, s);
        let (a, b) = (S::of(a), S::of(b));
        Ok(z.zip_map(eps_hat, |z, e| a * z + b * e)?)
    }

    /// Consistency function of `model` at (z, k).
    pub fn evaluate<S: Scalar>(
        &self,
        model: &Denoiser<S>,
        z: &Tensor<S>,
        k: usize,
        cond: &Tensor<S>,
        s: &NoiseSchedule,
    ) -> Result<Tensor<S>, DiffusionError> {
        s.check(k)?;
        let eps = model.predict(z, k, cond)?;
        self.apply(z, &eps, k, s)
    }

    fn record<S: Scalar>(&self, g: &mut Graph<S>, z: &Tensor<S>, eps_hat: Var, k: usize, s: &NoiseSchedule) -> Result<Var, DiffusionError> {
        let (a, b) = self.affine(k, s);
        let (a, b) = (S::of(a), S::of(b));
        let skip = g.input(z.map(|v| a * v));
        let out = g.scale(eps_hat, b);
        Ok(g.add(skip, out)?)
    }
}

/// Deterministic DDIM update from `k` to `k_prev` given a noise prediction.
pub fn ddim_step<S: Scalar>(
    z: &Tensor<S>,
    eps_hat: &Tensor<S>,
    k: usize,
    k_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<S>, DiffusionError> {
    s.check(k)?;
    s.check(k_prev)?;
    let (sa, sb) = s.coefficients(k);
    let (pa, pb) = s.coefficients(k_prev);
    let (sa, sb, pa, pb) = (S::of(sa), S::of(sb), S::of(pa), S::of(pb));
    Ok(z.zip_map(eps_hat, |z, e| pa * ((z - sb * e) / sa) + pb * e)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Timestep gap between the student and target evaluation points.
    pub skip: usize,
    pub ema_decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub param: ConsistencyParam,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { skip: 20, ema_decay: 0.95, lr: 1e-4, weight_decay: 1e-2, param: ConsistencyParam::default() }
    }
}

/// Student/target pair for consistency distillation against a frozen teacher.
#[derive(Clone, Debug)]
pub struct Distiller<S> {
    pub student: Denoiser<S>,
    pub target: Denoiser<S>,
    pub opt: AdamW<S>,
    pub config: DistillConfig,
}

impl<S: Scalar> Distiller<S> {
    /// Student and target both start as copies of the teacher.
    pub fn new(teacher: &Denoiser<S>, config: DistillConfig, s: &NoiseSchedule) -> Result<Self, DiffusionError> {
        if config.skip == 0 || config.skip >= s.len() {
            return Err(DiffusionError::Param(format!("skip must be in 1..{}, got {}", s.len(), config.skip)));
        }
        if !(0.0..=1.0).contains(&config.ema_decay) {
            return Err(DiffusionError::Param(format!("EMA decay must be in [0, 1], got {}", config.ema_decay)));
        }
        Ok(Self {
            student: teacher.clone(),
            target: teacher.clone(),
            opt: AdamW::new(config.lr, config.weight_decay),
            config,
        })
    }

    /// One distillation update on a single example; returns the loss.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        teacher: &Denoiser<S>,
        x: &Tensor<S>,
        cond: &Tensor<S>,
        s: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<f64, DiffusionError> {
        let cp = self.config.param;
        let k = rng.gen_range(self.config.skip..s.len());
        let k_prev = k - self.config.skip;
        let eps = Tensor::<S>::randn(x.shape(), rng);
        let z = add_noise(x, k, &eps, s)?;
        let eps_t = teacher.predict(&z, k, cond)?;
        let z_prev = ddim_step(&z, &eps_t, k, k_prev, s)?;
        let target = cp.evaluate(&self.target, &z_prev, k_prev, cond, s)?;

        let mut g = Graph::new();
        let p = self.student.params.bind(&mut g);
        let zv = g.input(z.clone());
        let eps_s = self.student.forward(&mut g, &p, zv, k, cond)?;
        let f = cp.record(&mut g, &z, eps_s, k, s)?;
        let tv = g.input(target);
        let loss_v = g.mse(f, tv)?;
        let loss = g.value(loss_v).item()?.f64();
        if !loss.is_finite() {
            return Err(DiffusionError::Divergence(format!(
                "non-finite distillation loss {loss} at step {} (timestep {k})",
                self.opt.steps_taken() + 1
            )));
        }
        g.backward(loss_v)?;
        self.student.params.collect_grads(&mut g, &p);
        self.opt.step(&mut self.student.params)?;
        self.student.params.zero_grad();
        self.target.params.ema_from(&self.student.params, self.config.ema_decay)?;
        Ok(loss)
    }
}

/// Runs `steps` distillation updates drawing examples from `data`; returns the
/// student and the loss sequence.
pub fn distill_consistency<S: Scalar, R: Rng + ?Sized>(
    teacher: &Denoiser<S>,
    s: &NoiseSchedule,
    config: DistillConfig,
    steps: usize,
    mut data: impl FnMut(&mut R) -> (Tensor<S>, Tensor<S>),
    rng: &mut R,
) -> Result<(Denoiser<S>, Vec<f64>), DiffusionError> {
    let mut dist = Distiller::new(teacher, config, s)?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (x, cond) = data(rng);
        losses.push(dist.step(teacher, &x, &cond, s, rng)?);
    }
    Ok((dist.student, losses))
}

/// Teacher DDIM trajectory through `ks` (descending), starting from x noised to `ks[0]`.
pub fn teacher_trajectory<S: Scalar>(
    teacher: &Denoiser<S>,
    x: &Tensor<S>,
    cond: &Tensor<S>,
    ks: &[usize],
    eps: &Tensor<S>,
    s: &NoiseSchedule,
) -> Result<Vec<(usize, Tensor<S>)>, DiffusionError> {
    let Some(&k0) = ks.first() else { return Ok(Vec::new()) };
    if ks.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DiffusionError::Param("trajectory timesteps must strictly decrease".into()));
    }
    let mut z = add_noise(x, k0, eps, s)?;
    let mut out = vec![(k0, z.clone())];
    for w in ks.windows(2) {
        let e = teacher.predict(&z, w[0], cond)?;
        z = ddim_step(&z, &e, w[0], w[1], s)?;
        out.push((w[1], z.clone()));
    }
    Ok(out)
}

/// Mean RMS difference of the consistency function between consecutive
/// points of a shared trajectory.
pub fn self_consistency<S: Scalar>(
    model: &Denoiser<S>,
    param: &ConsistencyParam,
    trajectory: &[(usize, Tensor<S>)],
    cond: &Tensor<S>,
    s: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    if trajectory.len() < 2 {
        return Err(DiffusionError::Param("need at least two trajectory points".into()));
    }
    let outs: Vec<Tensor<S>> = trajectory
        .iter()
        .map(|(k, z)| param.evaluate(model, z, *k, cond, s))
        .collect::<Result<_, _>>()?;
    let total: f64 = outs
        .windows(2)
        .map(|w| {
            let n = w[0].numel() as f64;
            (w[0].data().iter().zip(w[1].data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum();
    Ok(total / (outs.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(n_steps: usize, seed: u64) -> Result<Self, DiffusionError> {
        if !SAMPLER_STEPS.contains(&n_steps) {
            return Err(DiffusionError::Param(format!("n_steps must be one of {SAMPLER_STEPS:?}, got {n_steps}")));
        }
        Ok(Self { n_steps, seed })
    }
}

/// Uniform skipping grid from K−1 down to 0 with `n` points.
pub fn sampler_timesteps(n: usize, k: usize) -> Vec<usize> {
    if n < 2 {
        return vec![k - 1];
    }
    (0..n)
        .map(|i| (((k - 1) * (n - 1 - i)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Few-step consistency sampling; output is clamped to [0, 1].
pub fn sample<S: Scalar>(
    model: &Denoiser<S>,
    cond: &Tensor<S>,
    config: &SamplerConfig,
    param: &ConsistencyParam,
    s: &NoiseSchedule,
) -> Result<Tensor<S>, DiffusionError> {
    SamplerConfig::new(config.n_steps, config.seed)?;
    let c = cond.shape();
    if c.len() != 4 {
        return Err(TensorError::Shape(format!("conditioning must be [C][T][H][W], got {c:?}")).into());
    }
    let shape = [model.config().out_channels, c[1], c[2], c[3]];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ks = sampler_timesteps(config.n_steps, s.len());
    let mut z = Tensor::<S>::randn(&shape, &mut rng);
    let mut x_hat = z.clone();
    for (i, &k) in ks.iter().enumerate() {
        x_hat = param.evaluate(model, &z, k, cond, s)?.map(|v| v.max(S::zero()).min(S::one()));
        if let Some(&k_next) = ks.get(i + 1) {
            let eps = Tensor::<S>::randn(&shape, &mut rng);
            z = add_noise(&x_hat, k_next, &eps, s)?;
        }
    }
    Ok(x_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default_schedule();
        assert!((s.beta[0] - DEFAULT_BETA_START).abs() < 1e-18);
        assert!((s.beta[999] - DEFAULT_BETA_END).abs() < 1e-17);
        assert_eq!(s.alpha_bar[0], 1.0 - DEFAULT_BETA_START);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha_bar[0] > 0.99);
    }

    #[test]
    fn schedule_rejects_bad_endpoints() {
        for (a, b) in [(0.0, 0.1), (0.1, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            assert!(matches!(NoiseSchedule::new(1000, a, b), Err(DiffusionError::Param(_))));
        }
    }

    #[test]
    fn boundary_condition_is_exact() {
        for cp in [ConsistencyParam::default(), ConsistencyParam::unit_interval(1000)] {
            assert_eq!(cp.coefficients(0), (1.0, 0.0));
        }
    }

    #[test]
    fn noiseless_add_noise_scales_input() {
        let s = NoiseSchedule::default_schedule();
        let x = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let z = add_noise(&x, 500, &Tensor::zeros(&[3]), &s).unwrap();
        let a = s.alpha_bar[500].sqrt();
        for i in 0..3 {
            assert!((z.data()[i] - a * i as f64).abs() < 1e-15);
        }
        assert!(matches!(add_noise(&x, 1000, &Tensor::zeros(&[3]), &s), Err(DiffusionError::Range(_))));
    }

    #[test]
    fn ddim_with_true_noise_recovers_trajectory() {
        let s = NoiseSchedule::default_schedule();
        let x = Tensor::<f64>::from_fn(&[4], |i| 0.1 * i as f64);
        let e = Tensor::<f64>::from_fn(&[4], |i| 1.0 - 0.5 * i as f64);
        let z = add_noise(&x, 700, &e, &s).unwrap();
        let z2 = ddim_step(&z, &e, 700, 300, &s).unwrap();
        let want = add_noise(&x, 300, &e, &s).unwrap();
        assert!(z2.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn timestep_grid_spans_schedule() {
        assert_eq!(sampler_timesteps(4, 1000), vec![999, 666, 333, 0]);
        let g = sampler_timesteps(25, 1000);
        assert_eq!((g.len(), g[0], g[24]), (25, 999, 0));
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        assert!(SamplerConfig::new(5, 0).is_err());
    }
}
