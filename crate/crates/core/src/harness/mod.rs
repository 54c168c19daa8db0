//! Training, the transfer pipeline, flat baselines and CSV reporting.
//!
//! A transfer runs in three steps per seed: train a dense network on the
//! source task, prune it by magnitude from its best checkpoint, then reset the
//! pruned network and fine-tune it on the target task. Every (level, reset)
//! cell is compared against the unpruned source weights fine-tuned under the
//! same settings.

mod baseline;
mod config;
mod hyper;
mod report;
mod train;
mod transfer;

pub use baseline::{baseline_run, BaselineKind};
pub use config::{ExperimentConfig, PhaseHyper, PreparedTasks, TaskConfig};
pub use hyper::{FreezePolicy, Hyperparams};
pub use report::{emit_report, read_rows, summarize, write_rows, RunRow, SummaryRow, RUNS_FILE, SUMMARY_FILE};
pub use train::{evaluate, recalibrate_on, train, train_into, TrainOutcome, TrainReport};
pub use transfer::{
    baseline_median, cell_median, fine_tune, is_winning, level_masks, median, resolve_reset, run_cells, run_source, ticket_transfer,
    transfer_from_source, winning_ticket_median, winning_ticket_test, Cell, ExperimentResult, RunOptions, SeedResult,
    SourceRun,
};
