//! Learning-rate schedules.

use crate::error::bail;
use crate::scalar::{self, Scalar};
use crate::Result;

/// Linear warm-up from 0, a constant plateau, then a closed-form exponential
/// anneal that lands on `final_lr` at `anneal_until` and stays there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: Scalar,
    pub warmup_steps: u64,
    pub constant_until: u64,
    pub anneal_until: u64,
    pub final_lr: Scalar,
}

impl LrSchedule {
    pub fn paper() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 30_000,
            constant_until: 200_000,
            anneal_until: 300_000,
            final_lr: 1e-6,
        }
    }

    /// Same shape compressed to a 2,000-step toy run.
    pub fn desk() -> Self {
        Self {
            base_lr: 2e-3,
            warmup_steps: 100,
            constant_until: 1_300,
            anneal_until: 2_000,
            final_lr: 2e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.final_lr > 0.0) {
            bail!(Config, "learning rates must be positive");
        }
        if !(self.warmup_steps <= self.constant_until && self.constant_until < self.anneal_until) {
            bail!(Config, "schedule needs warmup <= constant_until < anneal_until");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Scalar {
        if step < self.warmup_steps {
            self.base_lr * step as Scalar / self.warmup_steps as Scalar
        } else if step <= self.constant_until {
            self.base_lr
        } else if step < self.anneal_until {
            let frac = (step - self.constant_until) as Scalar / (self.anneal_until - self.constant_until) as Scalar;
            self.base_lr * scalar::powf(self.final_lr / self.base_lr, frac)
        } else {
            self.final_lr
        }
    }
}

/// Fine-tuning recipe: exponential decay from `lr_start` to `lr_end` over
/// `steps`, batches drawn from the primary task with probability `mix`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneSpec {
    pub steps: u64,
    pub batch: usize,
    pub lr_start: Scalar,
    pub lr_end: Scalar,
    /// Fraction of batches drawn from the primary task; the rest come from
    /// the fine-tuning task.
    pub mix: Scalar,
}

impl FinetuneSpec {
    pub fn paper() -> Self {
        Self {
            steps: 10_000,
            batch: 4096,
            lr_start: 1e-5,
            lr_end: 5e-8,
            mix: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self {
            steps: 200,
            batch: 8,
            lr_start: 5e-4,
            lr_end: 2.5e-6,
            mix: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix) {
            bail!(Config, "mix fraction {} outside [0, 1]", self.mix);
        }
        if self.steps == 0 || self.batch == 0 || !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            bail!(Config, "fine-tuning needs positive steps, batch and learning rates");
        }
        Ok(())
    }

    /// Fractions of (primary, fine-tuning) batches; they sum to one.
    pub fn fractions(&self) -> (Scalar, Scalar) {
        (self.mix, 1.0 - self.mix)
    }

    pub fn lr_at(&self, step: u64) -> Scalar {
        if step >= self.steps {
            return self.lr_end;
        }
        if step == 0 {
            return self.lr_start;
        }
        self.lr_start * scalar::powf(self.lr_end / self.lr_start, step as Scalar / self.steps as Scalar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_values() {
        let s = LrSchedule::paper();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(15_000), 5e-5);
        assert_eq!(s.lr_at(30_000), 1e-4);
        assert_eq!(s.lr_at(200_000), 1e-4);
        assert_eq!(s.lr_at(300_000), 1e-6);
        assert!((s.lr_at(250_000) - 1e-5).abs() < 1e-17);
        let f = FinetuneSpec::paper();
        assert_eq!(f.lr_at(0), 1e-5);
        assert_eq!(f.lr_at(10_000), 5e-8);
        let (a, b) = f.fractions();
        assert_eq!(a + b, 1.0);
    }
}
