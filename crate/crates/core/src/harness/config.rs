use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DomainSpec, TEST_FRACTION};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::sparsify::{StrategyConfig, StrategyKind};
use crate::unet::ModelConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DGST_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    NearDomain,
    FarDomain,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::NearDomain => "near-domain",
            Task::FarDomain => "far-domain",
        }
    }

    pub fn spec(self, size: usize) -> DomainSpec {
        match self {
            Task::NearDomain => DomainSpec::near_domain(size),
            Task::FarDomain => DomainSpec::far_domain(size),
        }
    }

    pub fn default_shots(self) -> Vec<usize> {
        match self {
            Task::NearDomain => vec![3, 5, 10],
            Task::FarDomain => vec![5, 10, 20],
        }
    }

    fn data_stream(self) -> u64 {
        match self {
            Task::NearDomain => 2,
            Task::FarDomain => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near-domain" | "near" => Ok(Task::NearDomain),
            "far-domain" | "far" => Ok(Task::FarDomain),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected near-domain or far-domain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub source_samples: usize,
    pub source_test_samples: usize,
    pub downstream_samples: usize,
    /// Seed of the synthetic generator, shared by every experiment.
    pub seed: u64,
    /// Cache generated datasets under `<output>/datasets`.
    pub cache: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            source_samples: 200,
            source_test_samples: 24,
            downstream_samples: 120,
            seed: 2024,
            cache: true,
        }
    }
}

impl DataConfig {
    pub fn source_seed(&self) -> u64 {
        crate::seed::derive(&[self.seed, 0])
    }

    pub fn source_test_seed(&self) -> u64 {
        crate::seed::derive(&[self.seed, 1])
    }

    pub fn task_seed(&self, task: Task) -> u64 {
        crate::seed::derive(&[self.seed, task.data_stream()])
    }

    /// Size of the 80% training pool of a downstream dataset.
    pub fn pool_size(&self) -> usize {
        self.downstream_samples - (self.downstream_samples as f64 * TEST_FRACTION).round() as usize
    }
}

/// Everything an experiment command needs. Parsed from TOML; CLI flags are
/// applied on top through [`Overrides`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategy: StrategyConfig,
    pub shots: usize,
    /// Shot settings of the matrix; defaults to the task's grid.
    pub shot_grid: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub gammas: Vec<usize>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: OptimConfig,
    pub finetune: OptimConfig,
    pub pretrain_seed: u64,
    pub output: Option<PathBuf>,
    pub foundation: Option<PathBuf>,
    /// Cells run concurrently.
    pub jobs: usize,
    /// Forces sequential cells so iteration timings are not disturbed.
    pub timing_exclusive: bool,
    /// Write a checkpoint for every fine-tuned run.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::FarDomain,
            strategy: StrategyConfig::default(),
            shots: 5,
            shot_grid: None,
            seeds: vec![0, 1, 2, 3, 4],
            gammas: vec![1, 2, 3, 5, 10],
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: OptimConfig::pretrain(),
            finetune: OptimConfig::finetune(),
            pretrain_seed: 0,
            output: None,
            foundation: None,
            jobs: 1,
            timing_exclusive: false,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn shot_grid(&self) -> Vec<usize> {
        self.shot_grid.clone().unwrap_or_else(|| self.task.default_shots())
    }

    /// Output root: config, then `DGST_OUTPUT_ROOT`, then `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    pub fn foundation_path(&self) -> PathBuf {
        self.foundation
            .clone()
            .unwrap_or_else(|| self.output_root().join("foundation").join("foundation.ckpt"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.strategy.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let d = &self.data;
        if d.image_size == 0 || d.image_size % self.model.spatial_divisor() != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {}",
                d.image_size,
                self.model.spatial_divisor()
            )));
        }
        if d.source_samples == 0 || d.source_test_samples == 0 {
            return Err(Error::Config("source dataset sizes must be >= 1".into()));
        }
        if d.downstream_samples < 5 {
            return Err(Error::Config("downstream_samples must be >= 5".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        let grid = self.shot_grid();
        let pool = d.pool_size();
        if let Some(&bad) = grid.iter().find(|&&k| k == 0 || k > pool) {
            return Err(Error::Config(format!("shot setting {bad} outside 1..={pool}")));
        }
        if !grid.contains(&self.shots) && self.shots != pool {
            return Err(Error::Config(format!(
                "shots {} not in the configured grid {grid:?} (or the full pool of {pool})",
                self.shots
            )));
        }
        if self.gammas.is_empty() || self.gammas.contains(&0) {
            return Err(Error::Config("gammas must be a non-empty list of values >= 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        Ok(())
    }

    /// Concurrency for cell execution.
    pub fn effective_jobs(&self) -> usize {
        if self.timing_exclusive {
            1
        } else {
            self.jobs
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub task: Option<Task>,
    pub strategy: Option<StrategyKind>,
    pub gamma: Option<usize>,
    pub shots: Option<usize>,
    pub shot_grid: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub gammas: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub pretrain_epochs: Option<usize>,
    pub image_size: Option<usize>,
    pub output: Option<PathBuf>,
    pub foundation: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub timing_exclusive: bool,
    pub no_checkpoints: bool,
}

impl Overrides {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.task {
            cfg.task = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy.kind = v;
        }
        if let Some(v) = self.gamma {
            cfg.strategy.gamma = v;
        }
        if let Some(v) = self.shots {
            cfg.shots = v;
        }
        if let Some(v) = self.shot_grid {
            cfg.shot_grid = Some(v);
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.gammas {
            cfg.gammas = v;
        }
        if let Some(v) = self.epochs {
            cfg.finetune.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.finetune.lr0 = v;
        }
        if let Some(v) = self.pretrain_epochs {
            cfg.pretrain.epochs = v;
        }
        if let Some(v) = self.image_size {
            cfg.data.image_size = v;
        }
        if let Some(v) = self.output {
            cfg.output = Some(v);
        }
        if let Some(v) = self.foundation {
            cfg.foundation = Some(v);
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        cfg.timing_exclusive |= self.timing_exclusive;
        if self.no_checkpoints {
            cfg.save_checkpoints = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "task = \"near-domain\"\nshots = 3\n[strategy]\nkind = \"sgst\"\ngamma = 2\n[finetune]\nepochs = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.task, Task::NearDomain);
        assert_eq!(cfg.strategy.kind, StrategyKind::Sgst);
        assert_eq!(cfg.strategy.gamma, 2);
        assert_eq!(cfg.finetune.epochs, 7);
        assert_eq!(cfg.finetune.lr0, 1e-3);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml("shotz = 3").unwrap_err().is_config());
        let cfg = ExperimentConfig {
            seeds: vec![1, 1],
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
        let cfg = ExperimentConfig {
            shots: 7,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
        let mut cfg = ExperimentConfig::default();
        cfg.data.image_size = 60;
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = ExperimentConfig::from_toml("shots = 10\n[strategy]\nkind = \"full\"\n").unwrap();
        Overrides {
            shots: Some(20),
            strategy: Some(StrategyKind::Dgst),
            timing_exclusive: true,
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.shots, 20);
        assert_eq!(cfg.strategy.kind, StrategyKind::Dgst);
        assert_eq!(cfg.effective_jobs(), 1);
    }

    #[test]
    fn all_shot_pool_is_accepted() {
        let cfg = ExperimentConfig {
            shots: 96,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.data.pool_size(), 96);
    }
}
