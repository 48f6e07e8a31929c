use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the distillation objective.
///
/// The total loss is `(1 − w)·pred + w·gt + β·attn + γ·hddn`, where `w` is
/// `gt_weight`. With `w = 0` this is the plain three-part objective; `w = 0.5`
/// gives equal weight to soft and hard labels; `w = 1` trains on labels only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Softmax temperature applied to both sets of logits in the prediction term.
    #[serde(alias = "T")]
    pub temperature: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gt_weight: f64,
    /// Teacher of a different architecture: only logits are distilled.
    pub hetero_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            beta: 1.0,
            gamma: 0.1,
            gt_weight: 0.0,
            hetero_teacher: false,
        }
    }
}

/// Effective coefficient of every loss term; zero means the term is skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pred: f64,
    pub attn: f64,
    pub hddn: f64,
    pub gt: f64,
}

impl DistillConfig {
    /// Plain label cross-entropy, no teacher involved.
    pub fn ground_truth() -> Self {
        DistillConfig {
            beta: 0.0,
            gamma: 0.0,
            gt_weight: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gt_weight) {
            return Err(Error::config(format!("gt_weight must lie in [0, 1], got {}", self.gt_weight)));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        let (attn, hddn) = if self.hetero_teacher { (0.0, 0.0) } else { (self.beta, self.gamma) };
        LossWeights {
            pred: 1.0 - self.gt_weight,
            attn,
            hddn,
            gt: self.gt_weight,
        }
    }
}

impl LossWeights {
    pub fn needs_teacher(&self) -> bool {
        self.pred > 0.0 || self.needs_capture()
    }

    pub fn needs_capture(&self) -> bool {
        self.attn > 0.0 || self.hddn > 0.0
    }
}
