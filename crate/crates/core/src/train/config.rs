use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::parallel::Exec;

/// Whether the initial history matrix is optimised or frozen at its
/// random initialisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    #[default]
    Trained,
    Fixed,
}

/// Floating-point width used for parameters and arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl TryFrom<u8> for Precision {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::config(format!("precision must be 32 or 64, got {other}"))),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        p.bits()
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    /// Samples per optimiser step.
    pub batch_size: usize,
    pub epochs: usize,
    pub history_mode: HistoryMode,
    pub seed: u64,
    pub precision: Precision,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: u64,
    /// Stop once validation BLEU-4 reaches this value.
    pub target_bleu4: Option<f64>,
    /// Validate on at most this many samples per epoch.
    pub eval_samples: Option<usize>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            lr: 4e-4,
            batch_size: 32,
            epochs: 20,
            history_mode: HistoryMode::Trained,
            seed: 0,
            precision: Precision::F64,
            warmup_steps: 0,
            target_bleu4: None,
            eval_samples: None,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size profile: 512-wide model, batch 150, 10 epochs.
    pub fn paper_scale() -> Self {
        TrainConfig {
            model: ModelConfig::paper_scale(),
            batch_size: 150,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    /// Learning rate at optimiser step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_serialises_as_bits() {
        assert_eq!(serde_json::to_string(&Precision::F32).unwrap(), "32");
        assert_eq!(serde_json::from_str::<Precision>("64").unwrap(), Precision::F64);
        assert!(serde_json::from_str::<Precision>("16").is_err());
    }

    #[test]
    fn non_positive_lr_rejected() {
        let c = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = TrainConfig {
            warmup_steps: 4,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(8), 1.0);
    }
}
