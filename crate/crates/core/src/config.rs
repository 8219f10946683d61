//! Run configuration file: every section defaults, unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureLayout, Mode, TaskMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::reference::ReferenceConfig;
use crate::synthdata::windows::SplitSpec;
use crate::synthdata::WorldConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub mode: Mode,
    pub window: usize,
    pub horizon: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Reconstruct,
            window: 12,
            horizon: 12,
        }
    }
}

impl TaskConfig {
    pub fn task(&self) -> TaskMode {
        TaskMode::new(self.mode, self.window, self.horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub sensor_counts: Vec<usize>,
    pub repetitions: usize,
    pub batch_size: usize,
    /// Windows per timed epoch, identical at every sensor count.
    pub windows_per_epoch: usize,
    /// Days of synthetic data generated per sensor count.
    pub duration: u32,
    pub reference: ReferenceConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sensor_counts: vec![200, 1000, 2000],
            repetitions: 3,
            batch_size: 8,
            windows_per_epoch: 16,
            duration: 1,
            reference: ReferenceConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 2 {
            return Err(Error::Config(format!(
                "benchmark.repetitions must be >= 2 (got {})",
                self.repetitions
            )));
        }
        if self.sensor_counts.is_empty() || self.sensor_counts.contains(&0) {
            return Err(Error::Config("benchmark.sensor_counts must be non-empty and positive".into()));
        }
        if self.batch_size == 0 || self.windows_per_epoch == 0 || self.duration == 0 {
            return Err(Error::Config("benchmark batch_size, windows_per_epoch and duration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub query_ratios: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            query_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub split: SplitSpec,
    pub task: TaskConfig,
    pub layout: FeatureLayout,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub benchmark: BenchmarkConfig,
    /// Read CSVs from here instead of generating the world.
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            split: SplitSpec::default(),
            task: TaskConfig::default(),
            layout: FeatureLayout::standard(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            benchmark: BenchmarkConfig::default(),
            dataset_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.split.validate()?;
        self.task.task().validate()?;
        if self.layout != FeatureLayout::standard() {
            return Err(Error::Layout("only the standard feature layout is supported".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.benchmark.validate()?;
        if self.eval.query_ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::Config("eval.query_ratios must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Writes the fully resolved configuration into `out_dir`.
    pub fn echo(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
