//! Noise schedule, forward noising, the ε-prediction objective and ancestral
//! reverse steps.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, stored at array index `t - 1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl ScheduleParams {
    /// A shorter chain with β rescaled so ᾱ at the same *fraction* of the
    /// chain stays comparable (`β·T` held fixed).
    pub fn rescaled(steps: usize) -> Self {
        let base = Self::default();
        let f = base.steps as f64 / steps as f64;
        Self { steps, beta_min: base.beta_min * f, beta_max: base.beta_max * f }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Invalid(format!("beta range ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { params: ScheduleParams { steps, beta_min, beta_max }, beta, alpha, alpha_bar, sigma })
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_min, p.beta_max)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Copy with σ_t = 0 everywhere, making reverse steps deterministic.
    pub fn without_noise(&self) -> Self {
        let mut s = self.clone();
        s.sigma.iter_mut().for_each(|v| *v = 0.0);
        s
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

pub fn gaussian_like<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z)
            })
            .collect(),
    )
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("noise shape {:?} differs from x0 {:?}", eps.shape(), x0.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// A noise-prediction network `ε_θ(x_t, t, cond)`.
pub trait EpsModel<T: Scalar> {
    /// 1 for an unconditioned model, 2 when a coordinate channel is concatenated.
    fn in_channels(&self) -> usize;

    fn parameters(&self) -> &ParamSet<T>;

    /// Records the forward pass on `tape` using parameters bound via
    /// [`ParamSet::bind`]. `x_t` is `[1, Z, Y, X]`, `cond` likewise.
    fn predict(&self, tape: &mut Tape<T>, params: &Bound, x_t: Var, t: usize, cond: Option<Var>) -> Result<Var>;

    /// Inference-only prediction.
    fn predict_eps(&self, x_t: &Tensor<T>, t: usize, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let bound = self.parameters().bind(&mut tape);
        let x = tape.constant(x_t.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        let out = self.predict(&mut tape, &bound, x, t, c)?;
        Ok(tape.value(out).clone())
    }
}

fn check_conditioning<T: Scalar>(model: &dyn EpsModel<T>, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<()> {
    let want = 1 + usize::from(cond.is_some());
    if model.in_channels() != want {
        return Err(Error::Invalid(format!(
            "channel mismatch: model expects {} input channels, got {want} (conditioning {})",
            model.in_channels(),
            if cond.is_some() { "given" } else { "absent" }
        )));
    }
    if let Some(c) = cond {
        if c.shape() != x.shape() {
            return Err(Error::Shape(format!("conditioning shape {:?} differs from x {:?}", c.shape(), x.shape())));
        }
    }
    Ok(())
}

pub struct LossAndGrads<T> {
    pub loss: T,
    pub grads: ParamSet<T>,
    pub eps: Tensor<T>,
}

/// Mean squared error between a freshly drawn ε and `ε_θ(x_t, t, cond)`,
/// with gradients for every model parameter.
pub fn ddpm_loss<T: Scalar>(
    model: &dyn EpsModel<T>,
    x0: &Tensor<T>,
    t: usize,
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LossAndGrads<T>> {
    check_conditioning(model, x0, cond)?;
    let eps = gaussian_like(x0.shape(), rng);
    ddpm_loss_with_noise(model, x0, t, cond, sched, eps)
}

/// [`ddpm_loss`] with an explicit noise draw.
pub fn ddpm_loss_with_noise<T: Scalar>(
    model: &dyn EpsModel<T>,
    x0: &Tensor<T>,
    t: usize,
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    eps: Tensor<T>,
) -> Result<LossAndGrads<T>> {
    check_conditioning(model, x0, cond)?;
    let xt = q_sample(x0, t, &eps, sched)?;
    let mut tape = Tape::new();
    let bound = model.parameters().bind(&mut tape);
    let x = tape.constant(xt);
    let c = cond.map(|c| tape.constant(c.clone()));
    let pred = model.predict(&mut tape, &bound, x, t, c)?;
    let target = tape.constant(eps.clone());
    let loss = tape.mse(pred, target);
    let loss_value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss);
    let grads = model.parameters().gradients(&bound, &mut g);
    Ok(LossAndGrads { loss: loss_value, grads, eps })
}

/// One ancestral step `x_t → x_{t-1}`; no noise is added at `t = 1`.
pub fn p_step<T: Scalar>(
    model: &dyn EpsModel<T>,
    x_t: &Tensor<T>,
    t: usize,
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_conditioning(model, x_t, cond)?;
    let eps = model.predict_eps(x_t, t, cond)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let (a, b) = (T::from_f64(inv_sqrt_alpha), T::from_f64(inv_sqrt_alpha * coef));
    let mean = x_t.zip_map(&eps, |x, e| a * x - b * e);
    if t == 1 || sched.sigma(t) == 0.0 {
        return Ok(mean);
    }
    let z: Tensor<T> = gaussian_like(x_t.shape(), rng);
    let s = T::from_f64(sched.sigma(t));
    Ok(mean.zip_map(&z, |m, zi| m + s * zi))
}

/// Full reverse chain from `x_T ~ N(0, I)` down to an `x_0` estimate.
pub fn sample<T: Scalar>(
    model: &dyn EpsModel<T>,
    patch_shape: [usize; 3],
    cond: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let shape = [1, patch_shape[0], patch_shape[1], patch_shape[2]];
    let mut x = gaussian_like(&shape, rng);
    for t in (1..=sched.steps()).rev() {
        x = p_step(model, &x, t, cond, sched, rng)?;
    }
    Ok(x)
}
