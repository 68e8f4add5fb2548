use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::fnv1a64;
use crate::analysis::{LayerDims, WindowCount, SWEEP_RESOLUTION, SWEEP_SPANS};
use crate::attention::Span;
use crate::error::{Error, Result};
use crate::model::{MixerKind, ModelSpec};
use crate::train::{OptimizerConfig, TaskSpec, TrainSettings};

fn default_model() -> ModelSpec {
    ModelSpec::toy(MixerKind::Axial, Span::Global, 32)
}

/// Seeds of every random stream in a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub model: u64,
    #[serde(default = "one")]
    pub data: u64,
    #[serde(default = "two")]
    pub validation: u64,
    #[serde(default = "three")]
    pub train: u64,
}

fn one() -> u64 {
    1
}
fn two() -> u64 {
    2
}
fn three() -> u64 {
    3
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 0,
            data: one(),
            validation: two(),
            train: three(),
        }
    }
}

fn default_reps() -> usize {
    7
}
fn default_sweep_resolution() -> usize {
    SWEEP_RESOLUTION
}
fn default_spans() -> Vec<usize> {
    SWEEP_SPANS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Run on every thread instead of a single lane.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_spans")]
    pub spans: Vec<usize>,
    #[serde(default = "default_sweep_resolution")]
    pub sweep_resolution: usize,
    #[serde(default)]
    pub window_count: WindowCount,
    #[serde(default = "stage1")]
    pub layer: LayerDims,
}

fn stage1() -> LayerDims {
    LayerDims::STAGE1
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: default_reps(),
            parallel: false,
            spans: default_spans(),
            sweep_resolution: default_sweep_resolution(),
            window_count: WindowCount::Exact,
            layer: LayerDims::STAGE1,
        }
    }
}

/// Every knob of a run. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: default_model(),
            task: TaskSpec::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainSettings::default(),
            bench: BenchConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        if self.bench.repetitions == 0 {
            return Err(Error::Config("bench.repetitions must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a-64 of the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configs serialize");
        format!("{:016x}", fnv1a64(&canonical))
    }
}
