use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::hyper::{FreezePolicy, Hyperparams};
use crate::data::{SyntheticSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{preset, Architecture, HeadSpec};
use crate::prune::{PruneMode, PruneSchedule};
use crate::rng::derive_seed;
use crate::trajectory::ResetMode;

/// Where a task's data comes from: a directory of `.ltds` files or a
/// synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

fn yes() -> bool {
    true
}

impl TaskConfig {
    pub fn synthetic(name: &str, spec: SyntheticSpec) -> Self {
        TaskConfig {
            name: Some(name.to_string()),
            augment: true,
            dir: None,
            synthetic: Some(spec),
        }
    }

    pub fn display_name(&self, fallback: &str) -> String {
        self.name.clone().unwrap_or_else(|| fallback.to_string())
    }

    /// Materializes the task. Relative directories resolve against `base`.
    pub fn load(&self, fallback_name: &str, data_seed: u64, base: &Path) -> Result<TaskSpec> {
        let name = self.display_name(fallback_name);
        match (&self.dir, &self.synthetic) {
            (Some(dir), None) => TaskSpec::from_dir(name, base.join(dir), self.augment, data_seed),
            (None, Some(spec)) => {
                TaskSpec::synthetic(name, spec, derive_seed(data_seed, fallback_name), self.augment)
            }
            _ => Err(Error::Config(format!(
                "task `{name}` needs exactly one of `dir` or `synthetic`"
            ))),
        }
    }
}

/// Optimizer settings for the two phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseHyper {
    pub source: Hyperparams,
    pub target: Hyperparams,
}

impl Default for PhaseHyper {
    fn default() -> Self {
        PhaseHyper {
            source: Hyperparams::source_default(),
            target: Hyperparams::target_default(),
        }
    }
}

/// A full transfer experiment, usually read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Architecture preset name.
    pub arch: String,
    pub source: TaskConfig,
    pub target: TaskConfig,
    pub schedule: PruneSchedule,
    /// Reset modes evaluated at every level.
    #[serde(default = "default_reset")]
    pub reset: Vec<ResetMode>,
    #[serde(default)]
    pub freeze: FreezePolicy,
    /// Replacement head for the target task. When absent, the source head is
    /// kept if the class counts agree and a linear head is used otherwise.
    #[serde(default)]
    pub head_spec: Option<HeadSpec>,
    #[serde(default)]
    pub hyper: PhaseHyper,
    pub seeds: Vec<u64>,
    /// Pruning rounds (0 = unpruned) that get a target run. Defaults to every
    /// round of the schedule, or `[0]` for a zero-round schedule.
    #[serde(default)]
    pub levels: Option<Vec<u32>>,
    /// Seed for synthetic data, shared by all experiment seeds.
    #[serde(default)]
    pub data_seed: u64,
}

fn default_reset() -> Vec<ResetMode> {
    vec![ResetMode::Late]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.hyper.source.validate()?;
        self.hyper.target.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.reset.is_empty() {
            return Err(Error::Config("no reset modes".into()));
        }
        let max = self.max_level();
        if let Some(bad) = self.levels().iter().find(|&&l| l > max) {
            return Err(Error::Config(format!("level {bad} beyond the schedule's {max} round(s)")));
        }
        Ok(())
    }

    fn max_level(&self) -> u32 {
        match self.schedule.mode {
            PruneMode::Iterative { rounds } => rounds,
            PruneMode::OneShot { .. } => 1,
        }
    }

    pub fn levels(&self) -> Vec<u32> {
        match &self.levels {
            Some(l) => l.clone(),
            None => match self.max_level() {
                0 => vec![0],
                n => (1..=n).collect(),
            },
        }
    }

    pub fn schedule_label(&self) -> &'static str {
        match self.schedule.mode {
            PruneMode::Iterative { .. } => "iterative",
            PruneMode::OneShot { .. } => "one-shot",
        }
    }

    pub fn source_name(&self) -> String {
        self.source.display_name("source")
    }

    pub fn target_name(&self) -> String {
        self.target.display_name("target")
    }

    /// Loads both tasks; target images are channel-replicated to the source's
    /// channel count.
    pub fn prepare_tasks(&self, base: &Path) -> Result<PreparedTasks> {
        let source = self.source.load("source", self.data_seed, base)?;
        let target = self.target.load("target", self.data_seed, base)?;
        let target = target.adapt_channels(source.image_shape()[0])?;
        let source_arch = preset(&self.arch, source.image_shape(), source.num_classes())?;
        Ok(PreparedTasks {
            source,
            target,
            source_arch,
        })
    }
}

/// Loaded data and the source architecture of an experiment.
#[derive(Clone, Debug)]
pub struct PreparedTasks {
    pub source: TaskSpec,
    pub target: TaskSpec,
    pub source_arch: Architecture,
}
