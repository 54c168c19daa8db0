use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PreparedTasks};
use super::hyper::FreezePolicy;
use super::report::{write_rows, RunRow};
use super::train::{recalibrate_on, train, train_into, TrainReport};
use crate::error::{Error, Result};
use crate::model::{init_params, replace_head, Architecture, HeadSpec, ParameterSet};
use crate::prune::MaskSet;
use crate::rng::derive_seed;
use crate::tensor::Scalar;
use crate::trajectory::{ResetMode, Trajectory};

/// Step 1 of a transfer: a dense network trained on the source task.
pub struct SourceRun<T: Scalar> {
    pub seed: u64,
    pub arch: Architecture,
    pub report: TrainReport,
    pub trajectory: Trajectory<T>,
}

impl<T: Scalar> SourceRun<T> {
    /// Parameters at minimum source validation loss.
    pub fn theta_s(&self) -> Result<ParameterSet<T>> {
        Ok(self.trajectory.best_checkpoint()?.1)
    }
}

/// One pruned, reset and fine-tuned network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Pruning round the mask came from (0 = unpruned).
    pub level: u32,
    pub reset: ResetMode,
    pub report: TrainReport,
}

/// Everything produced for one experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub source: TrainReport,
    /// Unpruned source weights fine-tuned on the target task.
    pub baseline: TrainReport,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub arch: String,
    pub source: String,
    pub target: String,
    pub schedule_mode: String,
    pub freeze: FreezePolicy,
    pub seeds: Vec<SeedResult>,
}

/// Run-time knobs that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for independent runs; 0 uses all cores.
    pub workers: usize,
    /// Where to persist checkpoints, masks and per-cell rows.
    pub out_dir: Option<PathBuf>,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Trains the dense source network for `seed`.
pub fn run_source<T: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &PreparedTasks,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<SourceRun<T>> {
    let arch = tasks.source_arch.clone();
    let theta0 = init_params::<T>(&arch, arch.init, derive_seed(seed, "init"))?;
    let traj = match out_dir {
        Some(out) => Trajectory::create(&arch, seed_dir(out, seed).join("source"))?,
        None => Trajectory::in_memory(&arch),
    };
    let out = train_into(
        &arch,
        theta0,
        &MaskSet::ones(&arch),
        FreezePolicy::None,
        &tasks.source,
        &cfg.hyper.source,
        derive_seed(seed, "source-train"),
        traj,
    )?;
    Ok(SourceRun {
        seed,
        arch,
        report: out.report,
        trajectory: out.trajectory,
    })
}

/// Masks for each configured level, computed from the magnitudes of θ_S.
pub fn level_masks<T: Scalar>(cfg: &ExperimentConfig, source: &SourceRun<T>) -> Result<Vec<(u32, MaskSet)>> {
    let theta_s = source.theta_s()?;
    let ones = MaskSet::ones(&source.arch);
    let rounds = cfg.schedule.run(&theta_s, &ones)?;
    cfg.levels()
        .into_iter()
        .map(|l| {
            let m = if l == 0 { ones.clone() } else { rounds[l as usize - 1].clone() };
            Ok((l, m))
        })
        .collect()
}

fn target_head(cfg: &ExperimentConfig, source: &Architecture, target_classes: usize) -> Option<HeadSpec> {
    match cfg.head_spec {
        Some(h) => Some(h),
        None if source.num_classes != target_classes => Some(HeadSpec::Linear),
        None => None,
    }
}

/// Concrete seed for a random reset inside one experiment seed.
pub fn resolve_reset(mode: ResetMode, seed: u64) -> ResetMode {
    match mode {
        ResetMode::Random { seed: s } => ResetMode::Random {
            seed: derive_seed(seed, &format!("random-reset-{s}")),
        },
        other => other,
    }
}

/// Fine-tunes `params` (source architecture) on the target task, replacing
/// the head first when the experiment calls for it.
pub fn fine_tune<T: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &PreparedTasks,
    source: &SourceRun<T>,
    params: ParameterSet<T>,
    masks: &MaskSet,
) -> Result<TrainReport> {
    let classes = tasks.target.num_classes();
    let (arch, mut params) = match target_head(cfg, &source.arch, classes) {
        Some(head) => replace_head(&source.arch, &params, head, classes, derive_seed(source.seed, "head"))?,
        None => (source.arch.clone(), params),
    };
    if cfg.freeze.freezes_batchnorm() {
        // Frozen batchnorm cannot track the shift that pruning causes.
        recalibrate_on(&arch, &mut params, &tasks.target.train)?;
    }
    let out = train(
        &arch,
        params,
        masks,
        cfg.freeze,
        &tasks.target,
        &cfg.hyper.target,
        derive_seed(source.seed, "target-train"),
    )?;
    Ok(out.report)
}

/// Steps 2 and 3 of a transfer for one seed: prune θ_S, reset, fine-tune.
pub fn transfer_from_source<T: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &PreparedTasks,
    source: &SourceRun<T>,
    out_dir: Option<&Path>,
) -> Result<SeedResult> {
    let levels = level_masks(cfg, source)?;
    if let Some(out) = out_dir {
        let dir = seed_dir(out, source.seed).join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (l, m) in &levels {
            m.save(dir.join(format!("level-{l:02}.ltmk")))?;
        }
    }
    let ones = MaskSet::ones(&source.arch);
    let baseline = fine_tune(cfg, tasks, source, source.theta_s()?, &ones)?;
    if let Some(out) = out_dir {
        persist_partial(cfg, source.seed, None, &baseline, true, out)?;
    }
    let cells = run_cells(cfg, tasks, source, &levels, &baseline, out_dir)?;
    Ok(SeedResult {
        seed: source.seed,
        source: source.report.clone(),
        baseline,
        cells,
    })
}

/// Resets and fine-tunes every (level, reset mode) pair. `baseline` only
/// feeds the winning flag of persisted rows.
pub fn run_cells<T: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &PreparedTasks,
    source: &SourceRun<T>,
    levels: &[(u32, MaskSet)],
    baseline: &TrainReport,
    out_dir: Option<&Path>,
) -> Result<Vec<Cell>> {
    let jobs: Vec<(usize, ResetMode)> = (0..levels.len())
        .flat_map(|i| cfg.reset.iter().map(move |&m| (i, m)))
        .collect();
    jobs.par_iter()
        .map(|&(i, reset)| -> Result<Cell> {
            let (level, masks) = (levels[i].0, &levels[i].1);
            let params = source.trajectory.reset(resolve_reset(reset, source.seed), masks)?;
            let report = fine_tune(cfg, tasks, source, params, masks)?;
            if let Some(out) = out_dir {
                let winning = is_winning(&report, baseline);
                persist_partial(cfg, source.seed, Some((level, reset)), &report, winning, out)?;
            }
            Ok(Cell { level, reset, report })
        })
        .collect()
}

fn persist_partial(
    cfg: &ExperimentConfig,
    seed: u64,
    cell: Option<(u32, ResetMode)>,
    report: &TrainReport,
    winning: bool,
    out: &Path,
) -> Result<()> {
    let dir = out.join("cells");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (file, reset) = match cell {
        None => (format!("seed-{seed}-baseline.csv"), "dense"),
        Some((l, m)) => (format!("seed-{seed}-level-{l:02}-{}.csv", m.kind()), m.kind()),
    };
    write_rows(dir.join(file), &[RunRow::new(cfg, seed, reset, report, winning)])
}

/// The whole transfer pipeline over every configured seed.
pub fn ticket_transfer<T: Scalar>(cfg: &ExperimentConfig, tasks: &PreparedTasks, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let out = opts.out_dir.as_deref();
    let seeds = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let source = run_source::<T>(cfg, tasks, seed, out)?;
                transfer_from_source(cfg, tasks, &source, out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExperimentResult {
        arch: cfg.arch.clone(),
        source: cfg.source_name(),
        target: cfg.target_name(),
        schedule_mode: cfg.schedule_label().to_string(),
        freeze: cfg.freeze,
        seeds,
    })
}

const DENSITY_MATCH: f64 = 1e-9;

impl SeedResult {
    pub fn cell(&self, density: f64, mode: &str) -> Result<&Cell> {
        self.cells
            .iter()
            .find(|c| c.reset.kind() == mode && (c.report.density_prunable - density).abs() <= DENSITY_MATCH)
            .ok_or_else(|| Error::MissingCell {
                density,
                mode: mode.to_string(),
            })
    }
}

/// Cell reached the baseline's accuracy in no more steps.
pub fn is_winning(cell: &TrainReport, baseline: &TrainReport) -> bool {
    cell.best_step <= baseline.best_step && cell.test_accuracy >= baseline.test_accuracy
}

/// Winning-ticket criterion for one seed's cell at `density` (prunable
/// scope) and reset kind `mode` (`"late"`, `"ticket"` or `"random"`).
pub fn winning_ticket_test(result: &SeedResult, density: f64, mode: &str) -> Result<bool> {
    Ok(is_winning(&result.cell(density, mode)?.report, &result.baseline))
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median over seeds of `f(cell at level, mode)`.
pub fn cell_median(result: &ExperimentResult, level: u32, mode: &str, f: impl Fn(&TrainReport) -> f64) -> Result<f64> {
    let mut v = Vec::with_capacity(result.seeds.len());
    for s in &result.seeds {
        let c = s
            .cells
            .iter()
            .find(|c| c.level == level && c.reset.kind() == mode)
            .ok_or_else(|| Error::MissingCell {
                density: f64::NAN,
                mode: mode.to_string(),
            })?;
        v.push(f(&c.report));
    }
    Ok(median(&mut v))
}

pub fn baseline_median(result: &ExperimentResult, f: impl Fn(&TrainReport) -> f64) -> f64 {
    let mut v: Vec<f64> = result.seeds.iter().map(|s| f(&s.baseline)).collect();
    median(&mut v)
}

/// Winning-ticket criterion on medians across seeds: median best step no
/// later than the baseline's median and median accuracy at least the
/// baseline's median.
pub fn winning_ticket_median(result: &ExperimentResult, level: u32, mode: &str) -> Result<bool> {
    let step = cell_median(result, level, mode, |r| r.best_step as f64)?;
    let acc = cell_median(result, level, mode, |r| r.test_accuracy)?;
    Ok(step <= baseline_median(result, |r| r.best_step as f64) && acc >= baseline_median(result, |r| r.test_accuracy))
}

impl ExperimentResult {
    /// One row per cell and per baseline run.
    pub fn rows(&self) -> Vec<RunRow> {
        let mut rows = Vec::new();
        for s in &self.seeds {
            rows.push(RunRow::from_result(self, s.seed, "dense", &s.baseline, true));
            for c in &s.cells {
                rows.push(RunRow::from_result(
                    self,
                    s.seed,
                    c.reset.kind(),
                    &c.report,
                    is_winning(&c.report, &s.baseline),
                ));
            }
        }
        rows
    }
}
