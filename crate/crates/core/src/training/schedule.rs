use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};

/// Linear warmup then half-cosine decay, peak scaled by `batch / 256`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(
        base_lr: f64,
        batch_size: usize,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return usage_err(format!("base learning rate must be positive, got {base_lr}"));
        }
        if batch_size == 0 || total_epochs == 0 || steps_per_epoch == 0 {
            return usage_err("batch size, epochs and steps per epoch must be positive");
        }
        if warmup_epochs > total_epochs {
            return usage_err(format!("warmup {warmup_epochs} exceeds {total_epochs} epochs"));
        }
        Ok(Self {
            base_lr,
            batch_size,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
        })
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    /// Multiplier in `[0, 1]` at `step`; steps past the end stay at 0.
    pub fn ramp(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        let total = self.total_steps();
        if step < warm {
            return step as f64 / warm as f64;
        }
        if step >= total {
            return 0.0;
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn effective_lr(&self, step: u64) -> f64 {
        self.peak_lr() * self.ramp(step)
    }
}

pub fn effective_lr(step: u64, schedule: &Schedule) -> f64 {
    schedule.effective_lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_peak() {
        let s = Schedule::new(1.5e-4, 160, 2, 10, 25).unwrap();
        assert_eq!(effective_lr(0, &s), 0.0);
        assert_eq!(effective_lr(50, &s), 1.5e-4 * 160.0 / 256.0);
        assert!(effective_lr(250, &s).abs() < 1e-9);
        assert!(effective_lr(249, &s) > 0.0);
    }

    #[test]
    fn continuous_and_nonnegative() {
        let s = Schedule::new(1e-3, 16, 3, 12, 7).unwrap();
        let w = s.warmup_steps();
        let gap = (s.effective_lr(w) - s.effective_lr(w - 1)).abs();
        assert!(gap <= s.peak_lr() / w as f64 + 1e-15);
        let after = (s.effective_lr(w + 1) - s.effective_lr(w)).abs();
        assert!(after < s.peak_lr() * 1e-3);
        for step in 0..=s.total_steps() + 3 {
            assert!(s.effective_lr(step) >= 0.0);
        }
    }

    #[test]
    fn monotone_pieces() {
        let s = Schedule::new(1e-3, 256, 4, 20, 3).unwrap();
        let w = s.warmup_steps();
        for step in 1..=w {
            assert!(s.effective_lr(step) > s.effective_lr(step - 1));
        }
        for step in w + 1..=s.total_steps() {
            assert!(s.effective_lr(step) < s.effective_lr(step - 1));
        }
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = Schedule::new(2e-3, 128, 0, 5, 4).unwrap();
        assert_eq!(s.effective_lr(0), 1e-3);
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::new(0.0, 16, 0, 1, 1).is_err());
        assert!(Schedule::new(1e-3, 16, 5, 4, 1).is_err());
        assert!(Schedule::new(1e-3, 0, 0, 4, 1).is_err());
    }
}
