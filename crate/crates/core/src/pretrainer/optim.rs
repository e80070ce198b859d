//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::backbone::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Share of all steps spent ramping the learning rate up linearly.
    pub warmup_fraction: f64,
    pub min_lr: f64,
    /// Global gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.00025,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.04,
            warmup_fraction: 0.05,
            min_lr: 0.0,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.min_lr >= 0.0 && self.min_lr <= self.lr.max(0.0)) {
            return bad("learning rates must satisfy 0 <= min_lr <= lr");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup fraction must lie in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Learning rate for the zero-based `step` out of `total_steps`.
pub fn learning_rate(cfg: &OptimConfig, step: u64, total_steps: u64) -> f64 {
    let total = total_steps.max(1);
    let warmup = (cfg.warmup_fraction * total as f64).ceil() as u64;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: ModelParams<S>,
    pub v: ModelParams<S>,
}

impl<S: Real> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<S: Real>(grads: &mut ModelParams<S>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().to_f64_lossy().sqrt();
    if norm > max_norm {
        grads.scale(S::lit(max_norm / norm));
    }
    norm
}

/// One AdamW update at learning rate `lr`; `t` is the one-based update count used for bias correction.
pub fn adamw_update<S: Real>(
    params: &mut ModelParams<S>,
    state: &mut AdamState<S>,
    grads: &ModelParams<S>,
    cfg: &OptimConfig,
    lr: f64,
    t: u64,
) {
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let bc1 = S::lit(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = S::lit(1.0 - cfg.beta2.powf(t as f64));
    let (lr, eps, wd) = (S::lit(lr), S::lit(cfg.eps), S::lit(cfg.weight_decay));
    let one = S::one();
    let tensors =
        params.tensors_mut().into_iter().zip(state.m.tensors_mut()).zip(state.v.tensors_mut()).zip(grads.tensors());
    for ((((_, p), (_, m)), (_, v)), (_, g)) in tensors {
        let it = p.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice());
        for (((p, m), v), &g) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p -= lr * (update + wd * *p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig::default();
        let total = 100;
        assert!((learning_rate(&cfg, 0, total) - cfg.lr / 5.0).abs() < 1e-18);
        assert!((learning_rate(&cfg, 4, total) - cfg.lr).abs() < 1e-18);
        assert!((learning_rate(&cfg, 5, total) - cfg.lr).abs() < 1e-18);
        assert!(learning_rate(&cfg, 99, total) < cfg.lr * 0.01);
        let mid = learning_rate(&cfg, 5 + 95 / 2, total);
        assert!((mid - cfg.lr * 0.5).abs() < cfg.lr * 0.02);
        let lrs: Vec<f64> = (5..total).map(|s| learning_rate(&cfg, s, total)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let flat = OptimConfig { warmup_fraction: 0.0, ..cfg };
        assert_eq!(learning_rate(&flat, 0, total), cfg.lr);
    }

    #[test]
    fn matches_reference_recurrence_on_a_quadratic() {
        // loss = 0.5·a·(x − c)², gradient a·(x − c), applied to one scalar parameter
        let cfg = OptimConfig { lr: 0.05, ..OptimConfig::default() };
        let (a, c) = (3.0, 0.7);
        let mut params = ModelParams::<f64>::zeros(&ModelConfig::tiny()).unwrap();
        params.patch_bias.as_mut_slice()[0] = -1.2;
        let mut state = AdamState::new(&params);
        let (mut x, mut m, mut v) = (-1.2f64, 0.0f64, 0.0f64);
        for t in 1..=10u64 {
            let g = a * (params.patch_bias.as_slice()[0] - c);
            let mut grads = params.zeros_like();
            grads.patch_bias.as_mut_slice()[0] = g;
            adamw_update(&mut params, &mut state, &grads, &cfg, cfg.lr, t);

            let gr = a * (x - c);
            m = 0.9 * m + 0.1 * gr;
            v = 0.95 * v + 0.05 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.95f64.powi(t as i32));
            x -= cfg.lr * (mh / (vh.sqrt() + 1e-8) + 0.04 * x);
            assert!((params.patch_bias.as_slice()[0] - x).abs() <= 1e-12, "step {t}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let params0 = ModelParams::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        let mut params = params0.clone();
        let mut state = AdamState::new(&params);
        let mut grads = params.clone();
        grads.scale(3.0);
        adamw_update(&mut params, &mut state, &grads, &OptimConfig::default(), 0.0, 1);
        assert_eq!(params, params0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = ModelParams::<f64>::init(&ModelConfig::tiny(), 2).unwrap();
        let before = clip_grad_norm(&mut g, 0.5);
        assert!(before > 0.5);
        assert!((g.sq_norm().sqrt() - 0.5).abs() < 1e-12);
        assert!(OptimConfig { grad_clip: Some(0.0), ..Default::default() }.validate().is_err());
    }
}
