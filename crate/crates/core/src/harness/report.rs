//! CSV reports: one row per run, plus per-cell medians across seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::TrainReport;
use super::transfer::{median, ExperimentResult};
use crate::error::{Error, Result};

pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// One training run. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub arch: String,
    pub source: String,
    pub target: String,
    pub schedule_mode: String,
    pub density_prunable: f64,
    pub density_whole: f64,
    pub reset_mode: String,
    pub freeze: String,
    pub seed: u64,
    pub best_step: u64,
    pub best_val_loss: f64,
    pub test_accuracy: f64,
    pub is_winning_ticket: bool,
    pub wall_ms: u64,
}

impl RunRow {
    pub fn new(cfg: &ExperimentConfig, seed: u64, reset_mode: &str, report: &TrainReport, winning: bool) -> Self {
        RunRow {
            arch: cfg.arch.clone(),
            source: cfg.source_name(),
            target: cfg.target_name(),
            schedule_mode: cfg.schedule_label().to_string(),
            density_prunable: report.density_prunable,
            density_whole: report.density_whole,
            reset_mode: reset_mode.to_string(),
            freeze: cfg.freeze.to_string(),
            seed,
            best_step: report.best_step,
            best_val_loss: report.best_val_loss,
            test_accuracy: report.test_accuracy,
            is_winning_ticket: winning,
            wall_ms: report.wall_ms,
        }
    }

    pub fn from_result(result: &ExperimentResult, seed: u64, reset_mode: &str, report: &TrainReport, winning: bool) -> Self {
        RunRow {
            arch: result.arch.clone(),
            source: result.source.clone(),
            target: result.target.clone(),
            schedule_mode: result.schedule_mode.clone(),
            density_prunable: report.density_prunable,
            density_whole: report.density_whole,
            reset_mode: reset_mode.to_string(),
            freeze: result.freeze.to_string(),
            seed,
            best_step: report.best_step,
            best_val_loss: report.best_val_loss,
            test_accuracy: report.test_accuracy,
            is_winning_ticket: winning,
            wall_ms: report.wall_ms,
        }
    }

    /// Row for a stand-alone run with no pruning (e.g. a flat baseline).
    pub fn standalone(arch: &str, target: &str, seed: u64, report: &TrainReport) -> Self {
        RunRow {
            arch: arch.to_string(),
            source: String::new(),
            target: target.to_string(),
            schedule_mode: "none".into(),
            density_prunable: report.density_prunable,
            density_whole: report.density_whole,
            reset_mode: "none".into(),
            freeze: "none".into(),
            seed,
            best_step: report.best_step,
            best_val_loss: report.best_val_loss,
            test_accuracy: report.test_accuracy,
            is_winning_ticket: false,
            wall_ms: report.wall_ms,
        }
    }

    /// Equality ignoring `wall_ms`.
    pub fn same_outcome(&self, other: &RunRow) -> bool {
        RunRow { wall_ms: 0, ..self.clone() } == RunRow { wall_ms: 0, ..other.clone() }
    }
}

/// Medians across seeds for one (configuration, density, reset) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arch: String,
    pub source: String,
    pub target: String,
    pub schedule_mode: String,
    pub density_prunable: f64,
    pub density_whole: f64,
    pub reset_mode: String,
    pub freeze: String,
    pub seeds: usize,
    pub median_best_step: f64,
    pub median_best_val_loss: f64,
    pub median_test_accuracy: f64,
    /// Seeds on which the run was a winning ticket.
    pub winning_seeds: usize,
}

pub fn write_rows<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Groups rows that differ only in seed and reports medians. Group order
/// follows first appearance.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    type Key = (String, String, String, String, u64, String, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.arch.clone(),
            r.source.clone(),
            r.target.clone(),
            r.schedule_mode.clone(),
            r.density_prunable.to_bits(),
            r.reset_mode.clone(),
            r.freeze.clone(),
        );
        let g = groups.entry(key.clone()).or_default();
        if g.is_empty() {
            order.push(key);
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let med = |f: &dyn Fn(&RunRow) -> f64| median(&mut g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let first = g[0];
            SummaryRow {
                arch: first.arch.clone(),
                source: first.source.clone(),
                target: first.target.clone(),
                schedule_mode: first.schedule_mode.clone(),
                density_prunable: first.density_prunable,
                density_whole: med(&|r| r.density_whole),
                reset_mode: first.reset_mode.clone(),
                freeze: first.freeze.clone(),
                seeds: g.len(),
                median_best_step: med(&|r| r.best_step as f64),
                median_best_val_loss: med(&|r| r.best_val_loss),
                median_test_accuracy: med(&|r| r.test_accuracy),
                winning_seeds: g.iter().filter(|r| r.is_winning_ticket).count(),
            }
        })
        .collect()
}

/// Writes `runs.csv` and `summary.csv` into `dir`.
pub fn emit_report(rows: &[RunRow], dir: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::contract("no runs to report"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(dir.join(RUNS_FILE), rows)?;
    write_rows(dir.join(SUMMARY_FILE), &summarize(rows))
}
