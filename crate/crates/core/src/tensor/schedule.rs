//! Warmup-plus-cosine learning-rate schedule with per-epoch granularity.

use crate::error::{Error, Result};

/// Linear ramp from 0 to `peak_lr` over `warmup_epochs`, then a cosine decay
/// that lands exactly on `min_lr` at the final epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if self.warmup_epochs >= self.total_epochs && self.total_epochs > 1 {
            return Err(Error::Config(format!(
                "warmup {} must leave room in {} epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.peak_lr >= self.min_lr && self.min_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!(
                "need peak >= min >= 0, got peak {} min {}",
                self.peak_lr, self.min_lr
            )));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` in [0, total_epochs).
pub fn lr_at(s: &LrSchedule, epoch: usize) -> Result<f64> {
    s.validate()?;
    if epoch >= s.total_epochs {
        return Err(Error::Usage(format!(
            "epoch {epoch} outside schedule of {} epochs",
            s.total_epochs
        )));
    }
    if epoch < s.warmup_epochs {
        return Ok(s.peak_lr * epoch as f64 / s.warmup_epochs as f64);
    }
    let span = (s.total_epochs - 1).saturating_sub(s.warmup_epochs);
    if span == 0 {
        return Ok(s.peak_lr);
    }
    let progress = (epoch - s.warmup_epochs) as f64 / span as f64;
    Ok(s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
