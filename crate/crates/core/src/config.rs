//! Experiment configuration: a versioned JSON schema covering the three
//! workflows, plus named presets that reproduce the headline result grids
//! with one command.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Table2RowSpec, TrainConfig};
use crate::transforms::TransformKind;
use crate::ugconv::Sidedness;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    Verify,
    Train,
    Count,
}

/// Training hyperparameters as they appear in config files. The seed is
/// supplied per run from the `seeds` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// (epoch, learning rate) pairs; each rate applies from its epoch on.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Train on the first N samples (whole set when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    /// Per-epoch test error is measured on the first N test samples; the
    /// full test set is always evaluated once at the end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_subset: Option<usize>,
    /// Normalization applied after the [0,1] scaling.
    pub input_mean: f64,
    pub input_std: f64,
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

/// The desk-scale recipe used by the ablation presets: a subset of the
/// training split and a short schedule keep the full 25-run grid within a
/// desktop-CPU budget while leaving the accuracy ordering intact.
pub fn default_train_settings() -> TrainSettings {
    TrainSettings {
        epochs: 15,
        batch_size: 128,
        schedule: vec![(0, 0.1), (9, 0.01), (13, 0.001)],
        momentum: 0.9,
        weight_decay: 1e-4,
        train_subset: Some(8000),
        eval_subset: Some(2000),
        input_mean: 0.1307,
        input_std: 0.3081,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub workflow: Workflow,
    /// For `train`: "mnist-toy-row{1..4}". For `count`: a built-in
    /// architecture name (a descriptor file path is given on the command
    /// line instead).
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidedness: Option<Sidedness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSettings>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn parse(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Everything referenced must be constructible before any work
    /// starts.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.workflow {
            Workflow::Verify => Ok(()),
            Workflow::Train => {
                let row = self.table2_row()?;
                // Prove the network is constructible.
                crate::nn::build_mnist_toy::<f64>(&row, 0)?;
                let settings = self
                    .train
                    .as_ref()
                    .ok_or_else(|| Error::Config("train workflow needs train settings".into()))?;
                // epochs == 0 is evaluation-only and skips the schedule.
                if settings.epochs > 0 {
                    settings.to_train_config(0).validate()?;
                } else if settings.batch_size == 0 {
                    return Err(Error::Config("batch size must be positive".into()));
                }
                if self.seeds.is_empty() {
                    return Err(Error::Config("train workflow needs at least one seed".into()));
                }
                Ok(())
            }
            Workflow::Count => {
                crate::archs::builtin(&self.model)?;
                Ok(())
            }
        }
    }

    /// Interpret `model` + transform fields as an ablation row.
    pub fn table2_row(&self) -> Result<Table2RowSpec> {
        let row: usize = self
            .model
            .strip_prefix("mnist-toy-row")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Config(format!(
                    "train workflow expects model 'mnist-toy-rowN', got '{}'",
                    self.model
                ))
            })?;
        let kind = self.transform.unwrap_or(TransformKind::Identity);
        let sidedness = if kind == TransformKind::Identity {
            Sidedness::None
        } else {
            self.sidedness.unwrap_or(Sidedness::TwoSided)
        };
        Table2RowSpec::row(row, kind, sidedness)
    }
}

/// Named one-command reproductions. Ablation presets are
/// "table2-row{1..4}-{none|ortho-p|ortho-q|ortho-pq|perm-p|perm-q|perm-pq|hada-pq|shuffle-q|fourier-pq}";
/// count presets are the built-in architecture names.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    if let Some(rest) = name.strip_prefix("table2-row") {
        let (row_s, col) = rest
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("preset '{name}': expected a transform column")))?;
        let row: usize = row_s
            .parse()
            .map_err(|_| Error::Config(format!("preset '{name}': bad row number")))?;
        let (transform, sidedness) = match col {
            "none" => (None, None),
            "ortho-p" => (Some(TransformKind::RandomOrtho), Some(Sidedness::POnly)),
            "ortho-q" => (Some(TransformKind::RandomOrtho), Some(Sidedness::QOnly)),
            "ortho-pq" => (Some(TransformKind::RandomOrtho), Some(Sidedness::TwoSided)),
            "perm-p" => (Some(TransformKind::RandomPerm), Some(Sidedness::POnly)),
            "perm-q" => (Some(TransformKind::RandomPerm), Some(Sidedness::QOnly)),
            "perm-pq" => (Some(TransformKind::RandomPerm), Some(Sidedness::TwoSided)),
            "hada-pq" => (Some(TransformKind::Hadamard), Some(Sidedness::TwoSided)),
            "shuffle-q" => (Some(TransformKind::Shuffle), Some(Sidedness::QOnly)),
            "fourier-pq" => (Some(TransformKind::Fourier), Some(Sidedness::TwoSided)),
            _ => return Err(Error::Config(format!("preset '{name}': unknown column '{col}'"))),
        };
        let cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            workflow: Workflow::Train,
            model: format!("mnist-toy-row{row}"),
            transform,
            sidedness,
            train: Some(default_train_settings()),
            seeds: vec![1, 2, 3, 4, 5],
            output: None,
        };
        cfg.validate()?;
        return Ok(cfg);
    }
    if crate::archs::BUILTIN_NAMES.contains(&name) {
        let cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            workflow: Workflow::Count,
            model: name.to_string(),
            transform: None,
            sidedness: None,
            train: None,
            seeds: vec![],
            output: None,
        };
        cfg.validate()?;
        return Ok(cfg);
    }
    Err(Error::Config(format!("unknown preset '{name}'")))
}

pub const TABLE2_COLUMNS: &[&str] = &[
    "none", "ortho-p", "ortho-q", "ortho-pq", "perm-p", "perm-q", "perm-pq", "hada-pq",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_canonical() {
        let cfg = preset("table2-row4-ortho-pq").unwrap();
        let json = cfg.to_json().unwrap();
        let back = ExperimentConfig::parse(&json).unwrap();
        assert_eq!(cfg, back);
        // Canonical JSON comparison.
        let a: serde_json::Value = serde_json::from_str(&json).unwrap();
        let b: serde_json::Value = serde_json::from_str(&back.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_transform_rejected_before_work() {
        let json = r#"{
            "schema_version": 1,
            "workflow": "train",
            "model": "mnist-toy-row1",
            "transform": "warp",
            "train": null,
            "seeds": [1]
        }"#;
        assert!(ExperimentConfig::parse(json).is_err());
    }

    #[test]
    fn presets_cover_the_grid() {
        for row in 1..=4 {
            for col in TABLE2_COLUMNS {
                let name = format!("table2-row{row}-{col}");
                let cfg = preset(&name).unwrap();
                assert_eq!(cfg.workflow, Workflow::Train);
                assert_eq!(cfg.seeds.len(), 5);
            }
        }
        assert!(preset("table2-row5-none").is_err());
        assert!(preset("resnet18-g8").is_ok());
        assert!(preset("nonesuch").is_err());
    }

    #[test]
    fn validation_needs_constructible_combinations() {
        // One-sided Fourier is rejected by block construction, so the
        // config must fail validation up front.
        let mut cfg = preset("table2-row1-ortho-q").unwrap();
        cfg.transform = Some(TransformKind::Fourier);
        cfg.sidedness = Some(Sidedness::QOnly);
        assert!(cfg.validate().is_err());
    }
}
