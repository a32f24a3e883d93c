//! Experiment configuration: one JSON document with a section per module.
//!
//! Every field has a default, so an empty file (or `{}`) is a complete,
//! valid configuration.

use std::path::{Path, PathBuf};

use s2rl_core::datastore::{GenConfig, Generator};
use s2rl_core::envsim::{Family, Perturbation, GRID_SCALES};
use s2rl_core::orchestrator::{Mode, TrainerConfig};
use s2rl_core::sacpolicy::OnlineSacConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the offline dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Existing dataset file; takes precedence over generation.
    pub path: Option<PathBuf>,
    /// Generate into `<output>/data/` when `path` is absent.
    pub generate: bool,
    pub quality: Generator,
    pub size: usize,
    pub seed: u64,
    pub gen: GenConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            generate: true,
            quality: Generator::MediumReplay,
            size: 10_000,
            seed: 0,
            gen: GenConfig::default(),
        }
    }
}

/// Grid swept by `sweep`, `gap-report` and `kl-report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub modes: Vec<Mode>,
    pub family: Family,
    pub axes: Vec<Perturbation>,
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Latent, Mode::PooledBaseline],
            family: Family::Pendulum,
            axes: vec![Perturbation::Gravity],
            scales: vec![1.05, 1.1, 1.5, 2.0],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Base-policy training and evaluation grid for `degrade`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    /// Use this agent checkpoint instead of training one.
    pub policy: Option<PathBuf>,
    pub train_steps: usize,
    pub train_seed: u64,
    pub online: OnlineSacConfig,
    pub scales: Vec<f64>,
    pub episodes: usize,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            policy: None,
            train_steps: 6000,
            train_seed: 0,
            online: OnlineSacConfig::default(),
            scales: GRID_SCALES.to_vec(),
            episodes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Add the k-nearest-neighbor KL cross-check to KL reports.
    pub knn: bool,
    /// Write an SVG of the evaluation history into every run directory.
    pub plots: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            knn: false,
            plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub trainer: TrainerConfig,
    pub dataset: DatasetConfig,
    pub sweep: SweepConfig,
    pub degrade: DegradeConfig,
    pub reports: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("s2rl-out"),
            trainer: TrainerConfig::default(),
            dataset: DatasetConfig::default(),
            sweep: SweepConfig::default(),
            degrade: DegradeConfig::default(),
            reports: ReportConfig::default(),
        }
    }
}

fn check_scales(name: &str, scales: &[f64], v: &mut Vec<String>) {
    if scales.is_empty() {
        v.push(format!("{name} must not be empty"));
    }
    for s in scales {
        if !(s.is_finite() && *s > 0.0) {
            v.push(format!("{name}: scale {s} must be positive"));
        }
    }
}

impl ExperimentConfig {
    /// Every violated constraint, each prefixed with its section.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .trainer
            .violations()
            .into_iter()
            .map(|e| format!("trainer.{e}"))
            .collect();
        if self.output_dir.as_os_str().is_empty() {
            v.push("output_dir must not be empty".into());
        }
        let d = &self.dataset;
        match &d.path {
            Some(p) if !p.exists() && !d.generate => v.push(format!(
                "dataset.path {} does not exist and dataset.generate is false",
                p.display()
            )),
            None if !d.generate => v.push("dataset.path is required when dataset.generate is false".into()),
            _ => {}
        }
        if d.size == 0 {
            v.push("dataset.size must be at least 1".into());
        }
        if !matches!(d.quality, Generator::Medium | Generator::MediumReplay) && d.path.is_none() {
            v.push(format!("dataset.quality {} cannot be generated", d.quality));
        }
        let s = &self.sweep;
        if s.modes.is_empty() {
            v.push("sweep.modes must not be empty".into());
        }
        if s.axes.is_empty() {
            v.push("sweep.axes must not be empty".into());
        }
        for axis in &s.axes {
            if !s.family.axes().contains(axis) {
                v.push(format!("sweep.axes: {} does not support {axis}", s.family));
            }
        }
        check_scales("sweep.scales", &s.scales, &mut v);
        if s.seeds.is_empty() {
            v.push("sweep.seeds must not be empty".into());
        }
        check_scales("degrade.scales", &self.degrade.scales, &mut v);
        if self.degrade.episodes == 0 {
            v.push("degrade.episodes must be at least 1".into());
        }
        if self.degrade.policy.is_none() && self.degrade.train_steps == 0 {
            v.push("degrade.train_steps must be at least 1 without degrade.policy".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Invalid(v))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a config; blank text yields the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let config = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| CliError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?
    };
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
