use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub accum_steps: usize,
    /// Sequences per micro-batch; an update sees `accum_steps * micro_batch`.
    pub micro_batch: usize,
    pub warmup: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            accum_steps: 8,
            micro_batch: 4,
            warmup: 200,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.clip_norm <= 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("clip_norm and eps must be positive, weight_decay nonnegative"));
        }
        if self.accum_steps == 0 || self.micro_batch == 0 {
            return Err(Error::invalid("accum_steps and micro_batch must be >= 1"));
        }
        Ok(())
    }

    pub fn effective_batch(&self, micro_batch: usize) -> usize {
        self.accum_steps * micro_batch
    }
}

/// Adam moments, one flat buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn zeros(sizes: &[usize]) -> Self {
        OptimState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        OptimState::zeros(&params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }

    pub fn reset(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.fill(0.0);
        }
        self.t = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.t == 0 && self.m.iter().chain(&self.v).all(|b| b.iter().all(|&x| x == 0.0))
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::invalid(format!("total steps {total} must exceed warmup {warmup}")));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule of {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients by `clip / norm` when the global norm exceeds
/// `clip`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= s;
        }
    }
    norm
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::shape("adamw_step", format!("tensor {i} length mismatch")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

/// Running weighted sum of per-sequence gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    pub grads: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn zeros(sizes: &[usize]) -> Self {
        GradAccumulator { grads: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn add(&mut self, grads: &[Vec<f64>], weight: f64) {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += weight * x;
            }
        }
    }
}
