use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule: linear warmup, then step decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub backbone_lr: f64,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    /// Epoch fractions at which a new total decay factor takes effect.
    pub decay_points: Vec<f64>,
    /// Total (not incremental) multipliers, one per decay point.
    pub decay_factors: Vec<f64>,
    pub epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            backbone_lr: 1e-5,
            base_lr: 1e-4,
            warmup_fraction: 0.1,
            decay_points: vec![0.6, 0.9],
            decay_factors: vec![0.5, 0.1],
            epochs: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.decay_points.len() != self.decay_factors.len() {
            return Err(Error::Config(
                "decay_points and decay_factors differ in length".into(),
            ));
        }
        if self.decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_points must increase".into()));
        }
        if self.decay_factors.iter().any(|&f| f <= 0.0)
            || self.decay_factors.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::Config(
                "decay factors must be positive and non-increasing".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.backbone_lr < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier applied to the base learning rates at `epoch_fraction`
    /// (clamped to `[0, 1]`).
    pub fn multiplier(&self, epoch_fraction: f64) -> f64 {
        let f = epoch_fraction.clamp(0.0, 1.0);
        let warm = if f < self.warmup_fraction {
            f / self.warmup_fraction
        } else {
            1.0
        };
        let decay = self
            .decay_points
            .iter()
            .zip(&self.decay_factors)
            .filter(|(p, _)| f >= **p)
            .map(|(_, d)| *d)
            .last()
            .unwrap_or(1.0);
        warm * decay
    }
}

/// Free-function form of [`ScheduleConfig::multiplier`].
pub fn lr_schedule(config: &ScheduleConfig, epoch_fraction: f64) -> f64 {
    config.multiplier(epoch_fraction)
}
