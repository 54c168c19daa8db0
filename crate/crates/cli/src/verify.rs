//! Invariant checks over a directory of run artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ticket_core::data::{Dataset, Split};
use ticket_core::gradcheck::spot_check;
use ticket_core::harness::{read_rows, ExperimentConfig, RunRow, RUNS_FILE};
use ticket_core::model::preset;
use ticket_core::prune::{DensityScope, MaskSet};
use ticket_core::trajectory::{checkpoint, Trajectory, MANIFEST};
use ticket_core::{Error, Result};
use walkdir::WalkDir;

const SPOT_SAMPLES: usize = 200;
const SPOT_TOLERANCE: f64 = 1e-5;

#[derive(Default)]
struct Tally {
    checks: usize,
    failures: Vec<String>,
}

impl Tally {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn result<T>(&mut self, r: Result<T>, what: impl FnOnce() -> String) -> Option<T> {
        self.checks += 1;
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(format!("{}: {e}", what()));
                None
            }
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn check_file(path: &Path, t: &mut Tally) {
    let shown = path.display().to_string();
    let Some(bytes) = t.result(read(path), || shown.clone()) else {
        return;
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("ltds") => {
            if let Some(d) = t.result(Dataset::from_bytes(&bytes, Split::Train), || shown.clone()) {
                t.check(d.to_bytes().is_ok_and(|b| b == bytes), || format!("{shown}: re-encoding differs"));
            }
        }
        Some("ltmk") => {
            if let Some(m) = t.result(MaskSet::from_bytes(&bytes), || shown.clone()) {
                t.check(m.to_bytes().is_ok_and(|b| b == bytes), || format!("{shown}: re-encoding differs"));
            }
        }
        Some("ltck") => {
            let ok = checkpoint::decode_tensors::<f32>(&bytes)
                .map(|_| ())
                .or_else(|_| checkpoint::decode_tensors::<f64>(&bytes).map(|_| ()));
            t.result(ok, || shown.clone());
        }
        _ => {}
    }
}

/// Masks of one seed must shrink level by level.
fn check_mask_levels(dir: &Path, t: &mut Tally) {
    let mut levels: Vec<(String, MaskSet)> = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "ltmk")) {
        if let Ok(m) = MaskSet::load(f) {
            levels.push((f.display().to_string(), m));
        }
    }
    for w in levels.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        t.check(b.1.is_subset_of(&a.1), || format!("{} is not nested in {}", b.0, a.0));
        t.check(b.1.density(DensityScope::Prunable) <= a.1.density(DensityScope::Prunable), || {
            format!("{} is denser than {}", b.0, a.0)
        });
    }
}

/// Manifest lines: steps from 0, strictly increasing, files present.
fn check_manifest(path: &Path, cfg: Option<(&ExperimentConfig, &Path)>, t: &mut Tally) {
    let dir = path.parent().expect("file has a parent");
    let shown = path.display().to_string();
    let Some(text) = t.result(fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }), || shown.clone()) else {
        return;
    };
    let mut prev: Option<u64> = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let step = f.first().and_then(|s| s.parse::<u64>().ok());
        let ok = f.len() == 3 && f[1].parse::<f64>().is_ok_and(f64::is_finite) && step.is_some();
        t.check(ok, || format!("{shown}: bad line `{line}`"));
        if let Some(step) = step {
            let ordered = match prev {
                None => step == 0,
                Some(p) => step > p,
            };
            t.check(ordered, || format!("{shown}: step {step} out of order"));
            prev = Some(step);
        }
        if f.len() == 3 {
            t.check(dir.join(f[2]).is_file(), || format!("{shown}: missing {}", f[2]));
        }
    }
    // With the config, reload every snapshot against the architecture.
    if let Some((cfg, base)) = cfg {
        let Some(tasks) = t.result(cfg.prepare_tasks(base), || "loading the config's tasks".into()) else {
            return;
        };
        let arch = if dir.ends_with("target") {
            preset(&cfg.arch, tasks.target.image_shape(), tasks.target.num_classes())
        } else {
            Ok(tasks.source_arch.clone())
        };
        let Some(arch) = t.result(arch, || shown.clone()) else { return };
        let traj = Trajectory::<f32>::open(&arch, dir).and_then(|tr| {
            tr.checkpoints().iter().try_for_each(|c| tr.at_step(c.step).map(|_| ()))
        });
        let wide = Trajectory::<f64>::open(&arch, dir).and_then(|tr| {
            tr.checkpoints().iter().try_for_each(|c| tr.at_step(c.step).map(|_| ()))
        });
        t.result(traj.or(wide), || format!("{shown}: snapshots do not match `{}`", cfg.arch));
    }
}

type GroupKey = (String, String, String, String, String, u64);

fn group_key(r: &RunRow) -> GroupKey {
    (r.arch.clone(), r.source.clone(), r.target.clone(), r.schedule_mode.clone(), r.freeze.clone(), r.seed)
}

/// Per-row sanity and winning flags against the dense row of the same group.
fn check_runs(path: &Path, t: &mut Tally) {
    let shown = path.display().to_string();
    let Some(rows) = t.result(read_rows(path), || shown.clone()) else { return };
    let mut dense: BTreeMap<GroupKey, &RunRow> = BTreeMap::new();
    for r in &rows {
        t.check((0.0..=1.0).contains(&r.test_accuracy), || format!("{shown}: accuracy {} out of range", r.test_accuracy));
        t.check(r.density_prunable > 0.0 && r.density_prunable <= 1.0, || {
            format!("{shown}: density {} out of range", r.density_prunable)
        });
        if r.reset_mode == "dense" {
            dense.insert(group_key(r), r);
        }
    }
    for r in rows.iter().filter(|r| r.reset_mode != "dense") {
        if let Some(b) = dense.get(&group_key(r)) {
            let winning = r.best_step <= b.best_step && r.test_accuracy >= b.test_accuracy;
            t.check(winning == r.is_winning_ticket, || {
                format!("{shown}: seed {} {} at density {}: winning flag disagrees", r.seed, r.reset_mode, r.density_prunable)
            });
        }
    }
}

pub fn run(out_dir: &Path, cfg: Option<(&ExperimentConfig, &Path)>, gradients: bool) -> Result<()> {
    let mut files = Vec::new();
    for entry in WalkDir::new(out_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: e.path().unwrap_or(out_dir).to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    let mut t = Tally::default();
    for f in &files {
        check_file(f, &mut t);
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == MANIFEST {
            check_manifest(f, cfg, &mut t);
        }
        if name == RUNS_FILE {
            check_runs(f, &mut t);
        }
    }
    let mask_dirs: BTreeSet<&Path> = files.iter().filter_map(|f| f.parent()).filter(|d| d.ends_with("masks")).collect();
    for d in mask_dirs {
        check_mask_levels(d, &mut t);
    }
    println!("{} files, {} checks, {} failure(s)", files.len(), t.checks, t.failures.len());
    for f in &t.failures {
        println!("  FAIL {f}");
    }
    if gradients {
        let arch = match cfg {
            Some((c, base)) => {
                let tasks = c.prepare_tasks(base)?;
                let [ch, _, _] = tasks.source_arch.input_shape;
                preset(&c.arch, [ch, 8, 8], tasks.source_arch.num_classes)?
            }
            None => preset("micro-resnet", [3, 8, 8], 10)?,
        };
        let err = spot_check(&arch, 0, SPOT_SAMPLES, 1e-6, 1e-4)?;
        println!("gradient spot check on {} ({SPOT_SAMPLES} coordinates): max relative error {err:.2e}", arch.name);
        if err >= SPOT_TOLERANCE {
            return Err(Error::Oracle(format!("relative error {err:e} exceeds {SPOT_TOLERANCE:e}")));
        }
    }
    if t.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Malformed {
            what: "artifacts",
            detail: format!("{} invariant check(s) failed", t.failures.len()),
        })
    }
}
