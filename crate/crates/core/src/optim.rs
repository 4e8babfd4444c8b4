//! Adam, plain SGD, forced weight normalization and the learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Inverse-square-root decay with an optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub alpha_ref: f64,
    /// `None` keeps the rate constant.
    pub t_ref: Option<f64>,
    /// Warmup length in steps; 0 disables it.
    pub rampup: u64,
}

impl LrSchedule {
    pub fn constant(alpha_ref: f64) -> Self {
        Self {
            alpha_ref,
            t_ref: None,
            rampup: 0,
        }
    }

    pub fn inverse_sqrt(alpha_ref: f64, t_ref: f64) -> Self {
        Self {
            alpha_ref,
            t_ref: Some(t_ref),
            rampup: 0,
        }
    }

    pub fn with_rampup(mut self, steps: u64) -> Self {
        self.rampup = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_ref > 0.0 && self.alpha_ref.is_finite()) {
            return Err(Error::Config(format!("alpha_ref must be positive, got {}", self.alpha_ref)));
        }
        if let Some(t) = self.t_ref {
            if !(t > 0.0) {
                return Err(Error::Config(format!("t_ref must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// `alpha_ref / sqrt(max(t / t_ref, 1))`, times `min(t / rampup, 1)` when warming up.
pub fn lr_at(t: f64, sched: &LrSchedule) -> f64 {
    let mut lr = sched.alpha_ref;
    if let Some(t_ref) = sched.t_ref {
        lr /= (t / t_ref).max(1.0).sqrt();
    }
    if sched.rampup > 0 {
        lr *= (t / sched.rampup as f64).min(1.0);
    }
    lr
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }
}

fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("gradient", p.value.shape(), g.shape()));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let c1 = 1.0 - beta1.powf(state.step as f64);
    let c2 = 1.0 - beta2.powf(state.step as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `w <- w - lr * g`.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.value.axpy(-lr, g)?;
    }
    Ok(())
}

/// Rescales every eligible weight row to norm `sqrt(fan_in)`.
pub fn forced_renormalize(params: &mut ParamSet) {
    params.force_normalize_weights();
}

/// Zeroes NaN and Inf entries and returns how many were replaced.
pub fn sanitize_grads(grads: &mut [Tensor]) -> usize {
    let mut count = 0;
    for g in grads {
        for v in g.data_mut() {
            if !v.is_finite() {
                *v = 0.0;
                count += 1;
            }
        }
    }
    count
}
