//! Linear warmup followed by cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// 3e-5 decayed to 3e-7 after 100 warmup steps.
    pub fn published(total_steps: usize) -> Self {
        Self {
            lr_max: 3e-5,
            lr_min: 3e-7,
            warmup_steps: 100,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_min.is_finite()
            && self.lr_max.is_finite()
            && 0.0 < self.lr_min
            && self.lr_min <= self.lr_max;
        if !ok {
            return Err(Error::Config(format!(
                "schedule needs 0 < lr_min <= lr_max (got {} and {})",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// `lr_max * step / warmup` during warmup, then
    /// `lr_min + (lr_max - lr_min) * (1 + cos(pi * progress)) / 2`.
    ///
    /// The decay is evaluated as `lr_max * (1 - w) + lr_min * w` with
    /// `w = (1 - cos(pi * progress)) / 2`, which hits both endpoints exactly.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Input(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * step as f64 / self.warmup_steps as f64);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let w = (1.0 - (std::f64::consts::PI * progress).cos()) / 2.0;
        Ok(self.lr_max * (1.0 - w) + self.lr_min * w)
    }
}
