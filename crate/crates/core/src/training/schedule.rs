//! Learning-rate rules: batch-size scaling, linear warmup, step decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pretraining base rate `0.1 / 256 * batch_size`.
pub fn pretrain_base_lr(batch_size: usize) -> f64 {
    0.1 / 256.0 * batch_size as f64
}

/// Downstream rate `base_lr / 256 * batch_size`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr / 256.0 * batch_size as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_iterations: usize,
    pub warmup_fraction: f64,
    /// Iterations at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base lr {} is invalid",
                self.base_lr
            )));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay factor {} outside (0, 1)",
                self.decay_factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        if let Some(&m) = self.milestones.first() {
            if m < self.warmup_iterations() {
                return Err(Error::Config(format!(
                    "milestone {m} falls inside the {}-iteration warmup",
                    self.warmup_iterations()
                )));
            }
        }
        Ok(())
    }

    /// `ceil(warmup_fraction * total_iterations)`.
    pub fn warmup_iterations(&self) -> usize {
        (self.warmup_fraction * self.total_iterations as f64).ceil() as usize
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let warmup = self.warmup_iterations();
        if iteration < warmup {
            return self.base_lr * ((iteration + 1) as f64 / warmup as f64);
        }
        let passed = self.milestones.iter().filter(|m| **m <= iteration).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(milestones: Vec<usize>, factor: f64) -> LrSchedule {
        LrSchedule {
            base_lr: 1.0,
            total_iterations: 1000,
            warmup_fraction: 0.05,
            milestones,
            decay_factor: factor,
        }
    }

    #[test]
    fn base_lr_rule() {
        assert_eq!(pretrain_base_lr(2560), 1.0);
        assert_eq!(pretrain_base_lr(256), 0.1);
        assert_eq!(scaled_lr(0.025, 256), 0.025);
        assert_eq!(scaled_lr(0.025, 512), 0.05);
    }

    #[test]
    fn warmup_is_linear() {
        let s = sched(vec![], 0.5);
        assert_eq!(s.warmup_iterations(), 50);
        assert_eq!(s.lr_at(24), 0.5);
        assert_eq!(s.lr_at(0), 1.0 / 50.0);
        assert_eq!(s.lr_at(49), 1.0);
        assert_eq!(s.lr_at(50), 1.0);
    }

    #[test]
    fn step_decay() {
        let s = sched(vec![300, 600, 900], 0.5);
        assert_eq!(s.lr_at(299), 1.0);
        assert_eq!(s.lr_at(300), 0.5);
        assert_eq!(s.lr_at(700), 0.25);
        assert_eq!(s.lr_at(999), 0.125);
    }

    #[test]
    fn validation() {
        assert!(sched(vec![300, 600], 0.5).validate().is_ok());
        assert!(sched(vec![600, 300], 0.5).validate().is_err());
        assert!(sched(vec![10], 0.5).validate().is_err());
        assert!(sched(vec![], 1.0).validate().is_err());
        assert!(LrSchedule {
            warmup_fraction: 1.0,
            ..sched(vec![], 0.5)
        }
        .validate()
        .is_err());
    }
}
