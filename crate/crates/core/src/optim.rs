//! Adam and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort without
/// touching the parameters.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {} at step {}", grads[i], state.step + 1)));
    }
    state.step += 1;
    let b1c = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2c = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / b1c;
        let vh = state.v[i] / b2c;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Linear warmup to `max_lr` over `warmup` steps, then cosine decay to zero
/// at `total`. Steps past the end give zero.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, max_lr: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 10, 100, 1e-2), 0.0);
        assert_eq!(lr_schedule(10, 10, 100, 1e-2), 1e-2);
        assert_eq!(lr_schedule(5, 10, 100, 1e-2), 5e-3);
        assert!(lr_schedule(99, 10, 100, 1e-2) < 1e-5);
        assert_eq!(lr_schedule(100, 10, 100, 1e-2), 0.0);
        assert_eq!(lr_schedule(500, 10, 100, 1e-2), 0.0);
        assert!((lr_schedule(55, 10, 100, 1e-2) - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_sized_and_scale_invariant() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.5, -3.0], &mut s, 1e-2, &cfg).unwrap();
        assert!((p[0] + 1e-2).abs() < 1e-9);
        assert!((p[1] - 1e-2).abs() < 1e-9);
        let mut q = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut q, &[5.0, -30.0], &mut s, 1e-2, &cfg).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &mut s, 0.1, &AdamConfig::default()).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }
}
