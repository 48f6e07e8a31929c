use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Optimizer, schedule and batching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Learning rate at the end of the cosine decay.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warm-up steps before the cosine decay starts.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for shuffling and stochastic depth.
    pub seed: u64,
    /// Samples per independently evaluated chunk of a batch. Chunks run in
    /// parallel and their gradients are summed in a fixed order, so results
    /// do not depend on the thread count.
    pub micro_batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            epochs: 1,
            batch_size: 64,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            micro_batch: 16,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be a non-negative number, got {v}")))
            }
        };
        nonneg("lr", self.lr)?;
        nonneg("min_lr", self.min_lr)?;
        nonneg("weight_decay", self.weight_decay)?;
        nonneg("eps", self.eps)?;
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::config("batch_size and micro_batch must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Linear warm-up followed by a half-cosine from `base` down to `min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(cfg: &OptimConfig, total_steps: usize) -> Self {
        CosineSchedule {
            base: cfg.lr,
            min: cfg.min_lr.min(cfg.lr),
            warmup: cfg.warmup_steps,
            total: total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).saturating_sub(1).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
///
/// Per element: `θ ← θ·(1 − lr·λ)` for decayed tensors, then
/// `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: &OptimConfig, params: &[Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.len()]).collect::<Vec<_>>();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `decay[i]` selects decoupled weight decay for tensor `i`.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let f = F::from_f64_lossy;
        let (b1, b2, eps, c1, c2, lr_f) = (f(self.beta1), f(self.beta2), f(self.eps), f(c1), f(c2), f(lr));
        let shrink = f(1.0 - lr * self.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            if decay[i] {
                for x in data.iter_mut() {
                    *x *= shrink;
                }
            }
            for (((x, &g), m), v) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *x -= lr_f * (*m * c1) / ((*v * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hits_both_ends() {
        let cfg = OptimConfig::default();
        let s = CosineSchedule::new(&cfg, 101);
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(100) - 1e-5).abs() < 1e-15);
        assert!((s.lr_at(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        for step in 1..101 {
            assert!(s.lr_at(step) <= s.lr_at(step - 1));
        }
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = OptimConfig {
            warmup_steps: 4,
            ..Default::default()
        };
        let s = CosineSchedule::new(&cfg, 10);
        assert_eq!(s.lr_at(0), 0.25e-3);
        assert_eq!(s.lr_at(3), 1e-3);
        assert_eq!(s.lr_at(4), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // After one step m̂ = g and v̂ = g², so each coordinate moves by lr·sign(g).
        let cfg = OptimConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..Default::default()
        };
        let mut params = vec![Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap()];
        let grads = vec![Tensor::new(&[3], vec![0.5, -4.0, 1e-3]).unwrap()];
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params, &grads, &[true], 0.1).unwrap();
        let want = [0.9, 2.1, 2.9];
        for (a, b) in params[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let cfg = OptimConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut params = vec![Tensor::full(&[2], 2.0f64).unwrap(), Tensor::full(&[2], 2.0).unwrap()];
        let grads = vec![Tensor::zeros(&[2]).unwrap(), Tensor::zeros(&[2]).unwrap()];
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params, &grads, &[true, false], 0.1).unwrap();
        assert_eq!(params[0].data(), &[1.9, 1.9]);
        assert_eq!(params[1].data(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let cfg = OptimConfig::default();
        let mut params = vec![Tensor::new(&[2], vec![0.3f32, -0.7]).unwrap()];
        let before = params.clone();
        let grads = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params, &grads, &[true], 0.0).unwrap();
        assert_eq!(params, before);
    }
}
