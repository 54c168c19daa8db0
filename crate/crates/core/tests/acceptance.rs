//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stdout (so it shows without `--nocapture`) and then asserts.
//!
//! Criteria 6 to 9 share five source runs on the desk-scale transfer task;
//! they are computed once, on first use.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use common::{gradcheck_case, layer_case, quick_hyper, tiny_transfer, LAYER_CASES};
use ticket_core::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use ticket_core::harness::{
    baseline_run, emit_report, level_masks, median, read_rows, run_cells, run_source, ticket_transfer,
    transfer_from_source, train, winning_ticket_median, BaselineKind, ExperimentConfig, ExperimentResult,
    FreezePolicy, Hyperparams, PhaseHyper, PreparedTasks, RunOptions, SeedResult, SourceRun, TaskConfig, RUNS_FILE,
    SUMMARY_FILE,
};
use ticket_core::model::{init_params, preset, InitDist, ParameterSet};
use ticket_core::prune::{apply_mask, survivors_after, DensityScope, MaskSet, PruneSchedule};
use ticket_core::trajectory::{checkpoint, ResetMode};
use ticket_core::{Error, ErrorClass};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Level whose prunable density is closest to 20% (0.8^7 ≈ 0.21).
const MID_LEVEL: u32 = 7;
const ROUNDS: u32 = 11;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n:>2} {name:<28} {}  {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

fn hyper(lr: f64, steps: u64, eval: u64, wd: f64) -> Hyperparams {
    let mut h = quick_hyper(lr, steps, 16, eval);
    h.weight_decay = wd;
    h
}

/// 10-class RGB source, 5-class grayscale target built from other motifs.
fn desk_config() -> ExperimentConfig {
    let source = SyntheticSpec {
        num_classes: 10,
        shape: [3, 16, 16],
        train_per_class: 60,
        val_per_class: 20,
        test_per_class: 20,
        noise: 0.15,
        jitter: 2,
        contrast: 0.3,
        motif_offset: 0,
    };
    let target = SyntheticSpec {
        num_classes: 5,
        shape: [1, 16, 16],
        train_per_class: 40,
        val_per_class: 40,
        test_per_class: 60,
        noise: 0.3,
        jitter: 3,
        contrast: 0.3,
        motif_offset: 7,
    };
    ExperimentConfig {
        arch: "micro-resnet".into(),
        source: TaskConfig::synthetic("shapes10", source),
        target: TaskConfig::synthetic("shapes5", target),
        schedule: PruneSchedule::iterative(ROUNDS),
        reset: vec![ResetMode::Late],
        freeze: FreezePolicy::None,
        head_spec: None,
        hyper: PhaseHyper {
            source: hyper(0.2, 400, 50, 5e-3),
            target: hyper(0.02, 200, 25, 1e-4),
        },
        seeds: SEEDS.to_vec(),
        levels: None,
        data_seed: 0,
    }
}

struct Desk {
    cfg: ExperimentConfig,
    tasks: PreparedTasks,
    sources: Vec<SourceRun<f32>>,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = desk_config();
        let tasks = cfg.prepare_tasks(Path::new(".")).unwrap();
        let sources = SEEDS.iter().map(|&s| run_source(&cfg, &tasks, s, None).unwrap()).collect();
        Desk { cfg, tasks, sources }
    })
}

fn experiment(cfg: &ExperimentConfig, seeds: Vec<SeedResult>) -> ExperimentResult {
    ExperimentResult {
        arch: cfg.arch.clone(),
        source: cfg.source_name(),
        target: cfg.target_name(),
        schedule_mode: cfg.schedule_label().to_string(),
        freeze: cfg.freeze,
        seeds,
    }
}

/// Fine-tune-all transfer at levels 3 and 7, plus one-shot pruning to the
/// level-7 density from the same source weights.
struct FineTuneAll {
    iterative: ExperimentResult,
    one_shot: Vec<f64>,
    density: f64,
}

fn fine_tune_all() -> &'static FineTuneAll {
    static RUN: OnceLock<FineTuneAll> = OnceLock::new();
    RUN.get_or_init(|| {
        let d = desk();
        let mut cfg = d.cfg.clone();
        cfg.levels = Some(vec![3, MID_LEVEL]);
        let mut seeds = Vec::new();
        let mut one_shot = Vec::new();
        let mut density = 0.0;
        for source in &d.sources {
            let seed = transfer_from_source(&cfg, &d.tasks, source, None).unwrap();
            density = seed.cells.iter().find(|c| c.level == MID_LEVEL).unwrap().report.density_prunable;
            let mut os = cfg.clone();
            os.schedule = PruneSchedule::one_shot(density);
            os.levels = Some(vec![1]);
            let masks = level_masks(&os, source).unwrap();
            let cells = run_cells(&os, &d.tasks, source, &masks, &seed.baseline, None).unwrap();
            one_shot.push(cells[0].report.test_accuracy);
            seeds.push(seed);
        }
        FineTuneAll {
            iterative: experiment(&cfg, seeds),
            one_shot,
            density,
        }
    })
}

/// Frozen-conv transfer at the sparsest level with every reset mode, and the
/// fc2 pixel baseline on the same target.
struct Frozen {
    late: f64,
    ticket: f64,
    random: f64,
    fc2: f64,
    density: f64,
}

fn frozen() -> &'static Frozen {
    static RUN: OnceLock<Frozen> = OnceLock::new();
    RUN.get_or_init(|| {
        let d = desk();
        let mut cfg = d.cfg.clone();
        cfg.freeze = FreezePolicy::FreezeConv;
        cfg.reset = vec![ResetMode::Late, ResetMode::Ticket, ResetMode::Random { seed: 0 }];
        cfg.levels = Some(vec![ROUNDS]);
        let (mut late, mut ticket, mut random, mut fc2) = (vec![], vec![], vec![], vec![]);
        let mut density = 0.0;
        for source in &d.sources {
            let fc2_run = baseline_run::<f32>(BaselineKind::fc2(), &d.tasks.target, &cfg.hyper.target, source.seed).unwrap();
            fc2.push(fc2_run.test_accuracy);
            let masks = level_masks(&cfg, source).unwrap();
            for c in run_cells(&cfg, &d.tasks, source, &masks, &fc2_run, None).unwrap() {
                density = c.report.density_prunable;
                match c.reset {
                    ResetMode::Late => late.push(c.report.test_accuracy),
                    ResetMode::Ticket => ticket.push(c.report.test_accuracy),
                    ResetMode::Random { .. } => random.push(c.report.test_accuracy),
                }
            }
        }
        Frozen {
            late: median(&mut late),
            ticket: median(&mut ticket),
            random: median(&mut random),
            fc2: median(&mut fc2),
            density,
        }
    })
}

#[test]
fn criterion_01_gradient_correctness() {
    let t = Instant::now();
    let mut cases = 0;
    let mut worst = 0.0f64;
    for kind in LAYER_CASES {
        let arch = layer_case(kind);
        for seed in 0..10 {
            worst = worst.max(gradcheck_case(&arch, seed));
            cases += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient correctness",
        worst < 1e-5 && cases >= 100 && secs < 60.0,
        format!("{cases} cases, {} layer kinds, max rel err {worst:.2e}, {secs:.1}s", LAYER_CASES.len()),
    );
}

#[test]
fn criterion_02_sparsity_arithmetic() {
    let arch = preset("micro-resnet", [3, 16, 16], 10).unwrap();
    let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 0).unwrap();
    let ones = MaskSet::ones_for(&params);
    let rounds = PruneSchedule::iterative(12).run(&params, &ones).unwrap();
    let last = &rounds[11];
    let mut exact = true;
    for (k, masks) in rounds.iter().enumerate() {
        for (name, m) in masks.iter() {
            let p = params.get(name).unwrap();
            let n = ones.get(name).unwrap().count_ones();
            let expected = if p.prunable { survivors_after(n, 0.2, k as u32 + 1) } else { n };
            exact &= m.count_ones() == expected;
        }
    }
    let density = last.density(DensityScope::Prunable);
    let target = 0.8f64.powi(12);
    verdict(
        2,
        "sparsity arithmetic",
        exact && (density - target).abs() <= 0.005,
        format!("recurrence exact: {exact}, prunable density {density:.5} vs {target:.5}"),
    );
}

fn small_task() -> ticket_core::data::TaskSpec {
    let spec = SyntheticSpec {
        num_classes: 3,
        shape: [1, 8, 8],
        train_per_class: 30,
        val_per_class: 10,
        test_per_class: 10,
        noise: 0.2,
        jitter: 1,
        contrast: 0.2,
        motif_offset: 0,
    };
    ticket_core::data::TaskSpec::synthetic("small", &spec, 0, true).unwrap()
}

#[test]
fn criterion_03_mask_invariants() {
    let arch = preset("micro-resnet", [1, 8, 8], 3).unwrap();
    let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 5).unwrap();
    let ones = MaskSet::ones_for(&params);
    let rounds = PruneSchedule::iterative(6).run(&params, &ones).unwrap();

    let mut monotone = true;
    let mut dominance = true;
    let mut prev = &ones;
    for masks in &rounds {
        monotone &= masks.is_subset_of(prev);
        for (name, m) in masks.iter() {
            let w = params.get(name).unwrap().tensor.data();
            let before = prev.get(name).unwrap();
            let kept = (0..w.len()).filter(|&i| m.bits()[i]).map(|i| w[i].abs()).fold(f32::INFINITY, f32::min);
            dominance &= (0..w.len())
                .filter(|&i| before.bits()[i] && !m.bits()[i])
                .all(|i| w[i].abs() <= kept);
        }
        prev = masks;
    }
    let masks = &rounds[5];
    let once = apply_mask(&params, masks).unwrap();
    let idempotent = apply_mask(&once, masks).unwrap().bit_eq(&once);

    let out = train(&arch, params, masks, FreezePolicy::None, &small_task(), &quick_hyper(0.05, 1000, 8, 250), 1).unwrap();
    let mut zeros = out.report.steps_run == 1000;
    for c in out.trajectory.checkpoints() {
        let p = out.trajectory.at_step(c.step).unwrap();
        for (name, m) in masks.iter() {
            let data = p.get(name).unwrap().tensor.data();
            zeros &= m.bits().iter().zip(data).all(|(&keep, v)| keep || v.to_bits() == 0);
        }
    }
    verdict(
        3,
        "mask invariants",
        monotone && dominance && idempotent && zeros,
        format!(
            "monotone {monotone}, dominance {dominance}, idempotent {idempotent}, zeros after {} steps {zeros}",
            out.report.steps_run
        ),
    );
}

#[test]
fn criterion_04_freeze_contract() {
    let arch = preset("micro-resnet", [1, 8, 8], 3).unwrap();
    let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 6).unwrap();
    let frozen = FreezePolicy::FreezeConv.frozen_set(&params);
    let out = train(
        &arch,
        params.clone(),
        &MaskSet::ones(&arch),
        FreezePolicy::FreezeConv,
        &small_task(),
        &quick_hyper(0.05, 1000, 8, 250),
        2,
    )
    .unwrap();
    let equal = frozen.iter().all(|name| {
        let a = params.get(name).unwrap().tensor.data();
        let b = out.final_params.get(name).unwrap().tensor.data();
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let head_moved = !out.final_params.get("head.0.weight").unwrap().tensor.data().iter().zip(params.get("head.0.weight").unwrap().tensor.data()).all(|(a, b)| a == b);
    verdict(
        4,
        "freeze contract",
        equal && head_moved && out.report.steps_run == 1000,
        format!("{} frozen tensors byte-equal after {} steps: {equal}", frozen.len(), out.report.steps_run),
    );
}

#[test]
fn criterion_05_degenerate_equivalence() {
    let mut cfg = tiny_transfer(vec![7], 0);
    cfg.reset = vec![ResetMode::Late];
    let tasks = cfg.prepare_tasks(Path::new(".")).unwrap();
    let opts = RunOptions {
        workers: 1,
        out_dir: None,
    };
    let result = ticket_transfer::<f32>(&cfg, &tasks, &opts).unwrap();
    let seed = &result.seeds[0];
    let cell = &seed.cells[0].report;
    verdict(
        5,
        "degenerate equivalence",
        cell.density_prunable == 1.0 && cell.same_outcome(&seed.baseline),
        format!(
            "cell density {}, best step {} vs {}, acc {} vs {}",
            cell.density_prunable, cell.best_step, seed.baseline.best_step, cell.test_accuracy, seed.baseline.test_accuracy
        ),
    );
}

#[test]
fn criterion_06_desk_scale_winning_tickets() {
    let t = Instant::now();
    let run = fine_tune_all();
    let base = ticket_core::harness::baseline_median(&run.iterative, |r| r.test_accuracy);
    let late = ticket_core::harness::cell_median(&run.iterative, MID_LEVEL, "late", |r| r.test_accuracy).unwrap();
    let winning: Vec<u32> = [3, MID_LEVEL]
        .into_iter()
        .filter(|&l| winning_ticket_median(&run.iterative, l, "late").unwrap())
        .collect();
    verdict(
        6,
        "desk-scale winning tickets",
        (late - base).abs() <= 0.02 && !winning.is_empty() && run.density >= 0.2,
        format!(
            "density {:.3}: late {:.1}% vs dense {:.1}%; winning at levels {winning:?}; {:.0}s",
            run.density,
            pts(late),
            pts(base),
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_initialization_ordering() {
    let t = Instant::now();
    let r = frozen();
    let worse = r.ticket.min(r.random);
    verdict(
        7,
        "initialization ordering",
        r.density <= 0.10 && r.late >= r.ticket && r.late >= r.random && r.late - worse >= 0.02,
        format!(
            "density {:.3}: late {:.1}%, ticket {:.1}%, random {:.1}%; {:.0}s",
            r.density,
            pts(r.late),
            pts(r.ticket),
            pts(r.random),
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_fc_plateau() {
    let r = frozen();
    let gap_ticket = (r.ticket - r.fc2).abs();
    let gap_random = (r.random - r.fc2).abs();
    verdict(
        8,
        "fc plateau",
        r.density <= 0.10 && gap_ticket <= 0.03 && gap_random <= 0.03,
        format!(
            "density {:.3}: ticket {:.1}%, random {:.1}% vs fc2 {:.1}% (gaps {:.1} / {:.1} pts)",
            r.density,
            pts(r.ticket),
            pts(r.random),
            pts(r.fc2),
            pts(gap_ticket),
            pts(gap_random)
        ),
    );
}

#[test]
fn criterion_09_iterative_vs_one_shot() {
    let run = fine_tune_all();
    let iterative = ticket_core::harness::cell_median(&run.iterative, MID_LEVEL, "late", |r| r.test_accuracy).unwrap();
    let one_shot = median(&mut run.one_shot.clone());
    verdict(
        9,
        "iterative vs one-shot",
        iterative >= one_shot - 0.005,
        format!("density {:.3}: iterative {:.1}% vs one-shot {:.1}%", run.density, pts(iterative), pts(one_shot)),
    );
}

fn rejected(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<(), Error>) -> bool {
    let mut bad = bytes.to_vec();
    bad[0] ^= 0xff;
    let magic = matches!(decode(&bad), Err(e @ Error::BadMagic { .. }) if e.class() == ErrorClass::Io);
    let trunc = [5, bytes.len() / 2, bytes.len() - 1]
        .iter()
        .all(|&cut| matches!(decode(&bytes[..cut]), Err(e @ Error::Truncated { .. }) if e.class() == ErrorClass::Io));
    magic && trunc
}

#[test]
fn criterion_10_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let arch = preset("micro-resnet", [3, 16, 16], 10).unwrap();
    let mut ok = true;
    for seed in 0..5 {
        let p32: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, seed).unwrap();
        let p64: ParameterSet<f64> = init_params(&arch, InitDist::FanInNormal, seed).unwrap();
        let (a, b) = (dir.path().join("a.ltck"), dir.path().join("b.ltck"));
        checkpoint::save(&a, &p32).unwrap();
        checkpoint::save(&b, &p64).unwrap();
        let back32: ParameterSet<f32> = checkpoint::load(&a, &arch).unwrap();
        let back64: ParameterSet<f64> = checkpoint::load(&b, &arch).unwrap();
        ok &= back32.bit_eq(&p32) && back64.bit_eq(&p64);
        ok &= checkpoint::encode(&back32).unwrap() == std::fs::read(&a).unwrap();

        let masks = PruneSchedule::iterative(seed as u32 + 1).run(&p32, &MaskSet::ones_for(&p32)).unwrap().pop().unwrap();
        let m = dir.path().join("m.ltmk");
        masks.save(&m).unwrap();
        let back = MaskSet::load(&m).unwrap();
        ok &= back == masks && back.to_bytes().unwrap() == std::fs::read(&m).unwrap();
    }
    let (train_split, _, _) = generate_synthetic(&small_task_spec(), 3).unwrap();
    let d = dir.path().join("d.ltds");
    train_split.save(&d).unwrap();
    let back = ticket_core::data::load_dataset(&d).unwrap();
    ok &= back == train_split && back.to_bytes().unwrap() == std::fs::read(&d).unwrap();

    let p: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 0).unwrap();
    let ck = rejected(&checkpoint::encode(&p).unwrap(), |b| checkpoint::decode::<f32>(&arch, b).map(|_| ()));
    let mk = rejected(&MaskSet::ones(&arch).to_bytes().unwrap(), |b| MaskSet::from_bytes(b).map(|_| ()));
    let ds = rejected(&train_split.to_bytes().unwrap(), |b| Dataset::from_bytes(b, Split::Train).map(|_| ()));
    verdict(
        10,
        "serialization",
        ok && ck && mk && ds,
        format!("byte-exact round trips {ok}; corruption rejected: checkpoint {ck}, mask {mk}, dataset {ds}"),
    );
}

fn small_task_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        shape: [2, 9, 8],
        train_per_class: 5,
        val_per_class: 2,
        test_per_class: 2,
        noise: 0.2,
        jitter: 1,
        contrast: 0.2,
        motif_offset: 2,
    }
}

#[test]
fn criterion_11_determinism() {
    let cfg = tiny_transfer(vec![0, 1], 2);
    let tasks = cfg.prepare_tasks(Path::new(".")).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = RunOptions {
            workers: 1,
            out_dir: Some(d.path().to_path_buf()),
        };
        let result = ticket_transfer::<f32>(&cfg, &tasks, &opts).unwrap();
        emit_report(&result.rows(), d.path()).unwrap();
    }
    let a = read_rows(dirs[0].path().join(RUNS_FILE)).unwrap();
    let b = read_rows(dirs[1].path().join(RUNS_FILE)).unwrap();
    let runs = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_outcome(y));
    let summary = std::fs::read(dirs[0].path().join(SUMMARY_FILE)).unwrap()
        == std::fs::read(dirs[1].path().join(SUMMARY_FILE)).unwrap();
    verdict(
        11,
        "determinism",
        runs && summary,
        format!("{} run rows identical excluding wall_ms: {runs}; summary bytes identical: {summary}", a.len()),
    );
}
