//! Recorded optimization trajectories and the resets built from them.
//!
//! A [`Trajectory`] stores parameter snapshots with their validation loss,
//! starting at step 0. The snapshot with the lowest loss (earliest on ties)
//! is the "best" one. A [`ResetMode`] picks what a pruned network restarts
//! from: the step-0 weights, the best weights, or a fresh random draw.

pub mod checkpoint;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, Architecture, ParameterSet};
use crate::prune::{apply_mask, MaskSet};
use crate::tensor::Scalar;

pub const MANIFEST: &str = "manifest.txt";

/// What a pruned network is rewound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ResetMode {
    /// The step-0 weights.
    Ticket,
    /// The weights at minimum validation loss.
    Late,
    /// A fresh draw from the architecture's initializer.
    Random { seed: u64 },
}

impl ResetMode {
    pub fn kind(self) -> &'static str {
        match self {
            ResetMode::Ticket => "ticket",
            ResetMode::Late => "late",
            ResetMode::Random { .. } => "random",
        }
    }
}

impl fmt::Display for ResetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())
    }
}

/// Parses `ticket`, `late` or `random` (seed 0) / `random:SEED`.
impl FromStr for ResetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ticket" => Ok(ResetMode::Ticket),
            "late" => Ok(ResetMode::Late),
            "random" => Ok(ResetMode::Random { seed: 0 }),
            _ => s
                .strip_prefix("random:")
                .and_then(|n| n.parse().ok())
                .map(|seed| ResetMode::Random { seed })
                .ok_or_else(|| Error::Config(format!("unknown reset mode `{s}`"))),
        }
    }
}

impl TryFrom<String> for ResetMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ResetMode> for String {
    fn from(m: ResetMode) -> String {
        match m {
            ResetMode::Random { seed } => format!("random:{seed}"),
            other => other.kind().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub val_loss: f64,
    /// File name inside the store directory (also set for in-memory stores).
    pub file: String,
}

#[derive(Clone, Debug)]
enum Storage<T: Scalar> {
    Memory(Vec<ParameterSet<T>>),
    Dir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Trajectory<T: Scalar> {
    arch: Architecture,
    checkpoints: Vec<Checkpoint>,
    storage: Storage<T>,
    best: Option<usize>,
}

fn checkpoint_file(step: u64) -> String {
    format!("step-{step:08}.ltck")
}

impl<T: Scalar> Trajectory<T> {
    pub fn in_memory(arch: &Architecture) -> Self {
        Trajectory {
            arch: arch.clone(),
            checkpoints: Vec::new(),
            storage: Storage::Memory(Vec::new()),
            best: None,
        }
    }

    /// A new, empty store in `dir`. An existing manifest there is truncated.
    pub fn create(arch: &Architecture, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest = dir.join(MANIFEST);
        fs::write(&manifest, "").map_err(|e| Error::io(&manifest, e))?;
        Ok(Trajectory {
            arch: arch.clone(),
            checkpoints: Vec::new(),
            storage: Storage::Dir(dir),
            best: None,
        })
    }

    /// Reopens a store written by [`Trajectory::create`].
    pub fn open(arch: &Architecture, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut traj = Trajectory {
            arch: arch.clone(),
            checkpoints: Vec::new(),
            storage: Storage::Dir(dir),
            best: None,
        };
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |detail: &str| Error::Malformed {
                what: "manifest",
                detail: format!("line {}: {detail}", lineno + 1),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [step, loss, file] = fields[..] else {
                return Err(bad("expected `step val_loss filename`"));
            };
            let step: u64 = step.parse().map_err(|_| bad("bad step"))?;
            let val_loss: f64 = loss.parse().map_err(|_| bad("bad val_loss"))?;
            traj.push_entry(Checkpoint {
                step,
                val_loss,
                file: file.to_string(),
            })?;
        }
        Ok(traj)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Index of the lowest validation loss, earliest on ties.
    pub fn best_index(&self) -> Option<usize> {
        self.best
    }

    fn validate_next(&self, c: &Checkpoint) -> Result<()> {
        match self.checkpoints.last() {
            None if c.step != 0 => {
                return Err(Error::contract(format!("first checkpoint must be step 0, got {}", c.step)))
            }
            Some(last) if c.step <= last.step => {
                return Err(Error::contract(format!(
                    "step {} not after last recorded step {}",
                    c.step, last.step
                )))
            }
            _ => {}
        }
        if !c.val_loss.is_finite() {
            return Err(Error::contract(format!("non-finite validation loss at step {}", c.step)));
        }
        Ok(())
    }

    fn push_entry(&mut self, c: Checkpoint) -> Result<()> {
        self.validate_next(&c)?;
        if self.best.is_none_or(|b| c.val_loss < self.checkpoints[b].val_loss) {
            self.best = Some(self.checkpoints.len());
        }
        self.checkpoints.push(c);
        Ok(())
    }

    /// Appends a snapshot. Steps must start at 0 and strictly increase.
    pub fn record(&mut self, step: u64, params: &ParameterSet<T>, val_loss: f64) -> Result<()> {
        params.check_against(&self.arch)?;
        let entry = Checkpoint {
            step,
            val_loss,
            file: checkpoint_file(step),
        };
        self.validate_next(&entry)?;
        match &mut self.storage {
            Storage::Memory(v) => v.push(params.clone()),
            Storage::Dir(dir) => {
                checkpoint::save(dir.join(&entry.file), params)?;
                let manifest = dir.join(MANIFEST);
                let mut f = fs::OpenOptions::new()
                    .append(true)
                    .open(&manifest)
                    .map_err(|e| Error::io(&manifest, e))?;
                writeln!(f, "{} {:?} {}", entry.step, entry.val_loss, entry.file).map_err(|e| Error::io(&manifest, e))?;
            }
        }
        self.push_entry(entry)
    }

    fn load(&self, index: usize) -> Result<ParameterSet<T>> {
        match &self.storage {
            Storage::Memory(v) => Ok(v[index].clone()),
            Storage::Dir(dir) => checkpoint::load(dir.join(&self.checkpoints[index].file), &self.arch),
        }
    }

    /// Parameters recorded at exactly `step`.
    pub fn at_step(&self, step: u64) -> Result<ParameterSet<T>> {
        let i = self
            .checkpoints
            .binary_search_by_key(&step, |c| c.step)
            .map_err(|_| Error::MissingCheckpoint(step))?;
        self.load(i)
    }

    pub fn theta0(&self) -> Result<ParameterSet<T>> {
        if self.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        self.at_step(0)
    }

    /// `(step, parameters)` at minimum validation loss.
    pub fn best_checkpoint(&self) -> Result<(u64, ParameterSet<T>)> {
        let i = self.best.ok_or(Error::EmptyTrajectory)?;
        Ok((self.checkpoints[i].step, self.load(i)?))
    }

    /// Masked restart point for `mode`.
    pub fn reset(&self, mode: ResetMode, masks: &MaskSet) -> Result<ParameterSet<T>> {
        let base = match mode {
            ResetMode::Ticket => self.theta0()?,
            ResetMode::Late => self.best_checkpoint()?.1,
            ResetMode::Random { seed } => init_params(&self.arch, self.arch.init, seed)?,
        };
        masks.check_against(&base)?;
        apply_mask(&base, masks)
    }

    /// Masked restart from the snapshot at an arbitrary recorded step.
    pub fn reset_at_step(&self, step: u64, masks: &MaskSet) -> Result<ParameterSet<T>> {
        let base = self.at_step(step)?;
        masks.check_against(&base)?;
        apply_mask(&base, masks)
    }
}

/// Free-function form of [`Trajectory::reset`]; `arch` must match the
/// trajectory's architecture.
pub fn reset<T: Scalar>(
    arch: &Architecture,
    traj: &Trajectory<T>,
    mode: ResetMode,
    masks: &MaskSet,
) -> Result<ParameterSet<T>> {
    if arch != traj.arch() {
        return Err(Error::contract("architecture differs from the trajectory's"));
    }
    traj.reset(mode, masks)
}
