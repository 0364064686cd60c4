use std::fmt;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::error::{Error, Result};

/// Training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Warmup,
    Adapt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Warmup => "warmup",
            Stage::Adapt => "adapt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::Pretrain, Stage::Warmup, Stage::Adapt].into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Linear warmup to `peak` over `warmup_fraction` of the steps, then linear
/// decay to `final_fraction * peak` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub final_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { peak: 5e-4, warmup_fraction: 0.1, final_fraction: 0.0 }
    }
}

impl LrSchedule {
    /// Learning rate for 0-based `step` of `total`.
    pub fn at(&self, step: u64, total: u64) -> f64 {
        let warm = (self.warmup_fraction * total as f64).round() as u64;
        let s = step + 1;
        if s <= warm {
            return self.peak * s as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm).max(1) as f64;
        let frac = ((s - warm) as f64 / span).min(1.0);
        self.peak * (1.0 - frac * (1.0 - self.final_fraction))
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.peak >= 0.0 && self.peak.is_finite()) {
            return Err(Error::validation(format!("{field}.lr.peak"), "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.final_fraction) {
            return Err(Error::validation(format!("{field}.lr"), "fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global-norm gradient clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn desk(stage: Stage) -> Self {
        let steps = match stage {
            Stage::Pretrain => 2000,
            Stage::Warmup | Stage::Adapt => 500,
        };
        Self { stage, steps, batch_size: 4, lr: LrSchedule::default(), adam: AdamConfig::default(), grad_clip: Some(5.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let field = format!("train.{}", self.stage);
        if self.steps == 0 {
            return Err(Error::validation(format!("{field}.steps"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation(format!("{field}.batch_size"), "must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation(format!("{field}.grad_clip"), "must be positive"));
            }
        }
        self.lr.validate(&field)?;
        self.adam.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { peak: 1.0, warmup_fraction: 0.1, final_fraction: 0.0 };
        assert!((s.at(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.at(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.at(54, 100) - 0.5).abs() < 1e-12);
        assert!(s.at(99, 100).abs() < 1e-12);
        let flat = LrSchedule { peak: 2.0, warmup_fraction: 0.0, final_fraction: 1.0 };
        assert_eq!(flat.at(0, 10), 2.0);
        assert_eq!(flat.at(9, 10), 2.0);
    }

    #[test]
    fn zero_steps_rejected() {
        let c = TrainConfig { steps: 0, ..TrainConfig::desk(Stage::Pretrain) };
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "train.pretrain.steps"));
    }
}
