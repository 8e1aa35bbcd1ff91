//! Zero-shot transfer harness: joint pretraining over every synthetic
//! language, fine-pruning on one of them, evaluation on all of them.

mod data;
mod optim;
mod train;

pub use data::{
    generate_language_dataset, matrix_exponential, random_antisymmetric, stream_rng, Dataset,
    Prototypes, SyntheticLanguage, World,
};
pub use optim::AdamW;
pub use train::{
    build_data, confusion_matrix, evaluate, fineprune, predict, prepare, pretrain, train_step,
    DataBundle, FinepruneOutput, PretrainReport, Pretrained, StepDiagnostics,
};

use serde::{Deserialize, Serialize};

use crate::alignreg::RegularizerSpec;
use crate::encoder::EncoderConfig;
use crate::error::{bail, Result};
use crate::pruning::{CriterionSpec, PruneSchedule};

/// Full description of one experiment; `seeds` expands it into runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub encoder: EncoderConfig,
    pub criterion: CriterionSpec,
    pub regularizer: RegularizerSpec,
    pub schedule: PruneSchedule,
    pub n_languages: usize,
    pub train_language: usize,
    /// Per language, for joint pretraining.
    pub pretrain_samples: usize,
    /// Train-language samples used during fine-pruning.
    pub train_samples: usize,
    pub test_samples: usize,
    pub val_samples: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pretrain_epoch_cap: usize,
    pub pretrain_target_accuracy: f64,
    pub noise_sigma: f64,
    pub prototype_scale: f64,
    pub angle_step: f64,
    /// Record per-layer alignment and distortion measurements at every prune step.
    pub diagnostics: bool,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            encoder: EncoderConfig::default(),
            criterion: CriterionSpec::default(),
            regularizer: RegularizerSpec::default(),
            schedule: PruneSchedule::default(),
            n_languages: 5,
            train_language: 0,
            pretrain_samples: 2000,
            train_samples: 2000,
            test_samples: 500,
            val_samples: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            pretrain_epoch_cap: 50,
            pretrain_target_accuracy: 0.9,
            noise_sigma: 0.5,
            prototype_scale: 1.0,
            angle_step: 0.2,
            diagnostics: false,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.criterion.validate()?;
        self.regularizer.validate()?;
        self.schedule.validate()?;
        if self.run_id.is_empty() || self.run_id.contains([',', '/', '\\', '\n']) {
            bail!(
                Config,
                "run_id {:?} must be non-empty and free of , / \\ and newlines",
                self.run_id
            );
        }
        if self.n_languages < 2 {
            bail!(
                Config,
                "need at least two languages, got {}",
                self.n_languages
            );
        }
        if self.train_language >= self.n_languages {
            bail!(
                Config,
                "train_language {} outside [0, {})",
                self.train_language,
                self.n_languages
            );
        }
        let c = self.encoder.n_classes;
        for (name, n) in [
            ("pretrain_samples", self.pretrain_samples),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("val_samples", self.val_samples),
        ] {
            if n < c {
                bail!(Config, "{name} = {n} is fewer than the {c} classes");
            }
        }
        if self.batch_size == 0 || self.pretrain_epoch_cap == 0 {
            bail!(Config, "batch_size and pretrain_epoch_cap must be positive");
        }
        for (name, x) in [
            ("learning_rate", self.learning_rate),
            ("noise_sigma", self.noise_sigma),
            ("prototype_scale", self.prototype_scale),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                bail!(Config, "{name} must be positive, got {x}");
            }
        }
        if !(self.weight_decay >= 0.0 && self.angle_step.is_finite()) {
            bail!(
                Config,
                "weight_decay must be non-negative and angle_step finite"
            );
        }
        if self.seeds.is_empty() {
            bail!(Config, "seeds must not be empty");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// The fields that determine pretraining, as a stable cache key.
    pub fn pretrain_key(&self, seed: u64) -> String {
        serde_json::json!({
            "seed": seed,
            "encoder": self.encoder,
            "n_languages": self.n_languages,
            "pretrain_samples": self.pretrain_samples,
            "val_samples": self.val_samples,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "pretrain_epoch_cap": self.pretrain_epoch_cap,
            "pretrain_target_accuracy": self.pretrain_target_accuracy,
            "noise_sigma": self.noise_sigma,
            "prototype_scale": self.prototype_scale,
            "angle_step": self.angle_step,
        })
        .to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// The loss went non-finite; the run stopped here.
    Aborted,
}

impl RowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Aborted => "aborted",
        }
    }
}

/// One evaluation after a fine-pruning interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub criterion: String,
    pub regularizer: String,
    pub step: usize,
    pub remaining_fraction: f64,
    pub train_accuracy: f64,
    pub language_accuracy: Vec<f64>,
    pub mean_zero_shot: f64,
    pub ce_loss: f64,
    pub regularizer_value: f64,
    pub wall_ms: u64,
    pub status: RowStatus,
}

impl MetricsRow {
    /// Train-language accuracy minus mean zero-shot accuracy.
    pub fn transfer_gap(&self) -> f64 {
        self.train_accuracy - self.mean_zero_shot
    }
}

/// Mean accuracy over every language except `train`.
pub fn mean_zero_shot(accuracies: &[f64], train: usize) -> f64 {
    let others: Vec<f64> = accuracies
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != train)
        .map(|(_, a)| *a)
        .collect();
    others.iter().sum::<f64>() / others.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train_language": 5}"#).is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"criterion": {"kind": "lamp", "scope": "global"}}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
        let c =
            ExperimentConfig::from_json(r#"{"regularizer": {"kind": "frobenius"}, "seeds": [3]}"#)
                .unwrap();
        assert_eq!(c.regularizer.lambda, crate::alignreg::DEFAULT_LAMBDA);
    }

    #[test]
    fn zero_shot_mean_skips_train_language() {
        assert_eq!(mean_zero_shot(&[1.0, 0.5, 0.25], 0), 0.375);
        assert_eq!(mean_zero_shot(&[1.0, 0.5, 0.25], 2), 0.75);
    }
}
