//! `ticket`: train, prune and transfer lottery tickets from the command line.

mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ticket_core::data::{SyntheticSpec, TaskSpec};
use ticket_core::harness::{
    baseline_run, emit_report, read_rows, run_source, ticket_transfer, train_into, write_rows, BaselineKind,
    ExperimentConfig, FreezePolicy, PreparedTasks, RunOptions, RunRow, TrainReport, RUNS_FILE,
};
use ticket_core::model::{init_params, preset};
use ticket_core::prune::{DensityScope, MaskSet};
use ticket_core::rng::derive_seed;
use ticket_core::tensor::Scalar;
use ticket_core::trajectory::{checkpoint, Trajectory};
use ticket_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "ticket", version, about = "Find winning tickets by magnitude pruning and transfer them")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Run a single seed (overrides the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, masks and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for independent runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Use f64 arithmetic; `verify` also spot-checks gradients.
    #[arg(long, global = true)]
    f64: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured architecture on one task, densely.
    Train {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Phase::Source)]
        task: Phase,
    },
    /// Run the whole transfer experiment described by a config file.
    Transfer { config: PathBuf },
    /// Compute pruning masks offline from a saved checkpoint.
    Prune {
        config: PathBuf,
        /// Checkpoint to rank; defaults to the best checkpoint of a prior
        /// `train` run in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a flat pixel classifier on the target task.
    Baseline {
        config: PathBuf,
        /// `logistic`, `fc2` or `fc2:HIDDEN`.
        #[arg(long, default_value = "fc2")]
        kind: String,
    },
    /// Merge run CSVs into runs.csv and summary.csv.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a synthetic task (train/val/test .ltds files).
    GenData(GenData),
    /// Check the artifacts in the output directory.
    Verify {
        /// Config the artifacts came from; enables trajectory checks.
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Source,
    Target,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Image shape as C,H,W.
    #[arg(long, default_value = "3,16,16", value_parser = parse_shape)]
    shape: [usize; 3],
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    val_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    jitter: usize,
    #[arg(long, default_value_t = 0.3)]
    contrast: f64,
    #[arg(long, default_value_t = 0)]
    motif_offset: usize,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("`{d}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    dims.try_into().map_err(|_| "expected C,H,W".to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Divergent(n)) => {
            eprintln!("warning: {n} run(s) diverged (non-finite loss)");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}

enum Outcome {
    Done,
    Divergent(usize),
}

impl Outcome {
    fn from_reports<'a>(reports: impl IntoIterator<Item = &'a TrainReport>) -> Self {
        match reports.into_iter().filter(|r| r.divergent).count() {
            0 => Outcome::Done,
            n => Outcome::Divergent(n),
        }
    }
}

/// Calls a generic command with `f32` or `f64` scalars.
macro_rules! dispatch {
    ($wide:expr, $f:ident($($arg:expr),*)) => {
        if $wide { $f::<f64>($($arg),*) } else { $f::<f32>($($arg),*) }
    };
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = cli.global;
    match cli.command {
        Command::Train { config, task } => dispatch!(g.f64, train_cmd(&g, &config, task)),
        Command::Transfer { config } => dispatch!(g.f64, transfer_cmd(&g, &config)),
        Command::Prune { config, checkpoint } => dispatch!(g.f64, prune_cmd(&g, &config, checkpoint.as_deref())),
        Command::Baseline { config, kind } => dispatch!(g.f64, baseline_cmd(&g, &config, &kind)),
        Command::Report { inputs } => report_cmd(&g, &inputs),
        Command::GenData(args) => gen_data_cmd(&g, &args),
        Command::Verify { config } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            verify::run(&g.out_dir, cfg.as_ref().map(|(c, base)| (c, base.as_path())), g.f64)?;
            Ok(Outcome::Done)
        }
    }
}

/// Parses a config; relative data paths resolve against its directory.
fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn seeds(g: &Global, cfg: &ExperimentConfig) -> Vec<u64> {
    g.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn prepared(path: &Path) -> Result<(ExperimentConfig, PreparedTasks)> {
    let (cfg, base) = load_config(path)?;
    let tasks = cfg.prepare_tasks(&base)?;
    Ok((cfg, tasks))
}

fn print_report(label: &str, r: &TrainReport) {
    println!(
        "{label}: best step {} val loss {:.4} test acc {:.4} density {:.4}{}",
        r.best_step,
        r.best_val_loss,
        r.test_accuracy,
        r.density_prunable,
        if r.divergent { " (diverged)" } else { "" }
    );
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn train_cmd<T: Scalar>(g: &Global, config: &Path, phase: Phase) -> Result<Outcome> {
    let (cfg, tasks) = prepared(config)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for seed in seeds(g, &cfg) {
        let (task_name, report) = match phase {
            Phase::Source => {
                let run = run_source::<T>(&cfg, &tasks, seed, Some(&g.out_dir))?;
                (cfg.source_name(), run.report)
            }
            Phase::Target => {
                let task = &tasks.target;
                let arch = preset(&cfg.arch, task.image_shape(), task.num_classes())?;
                let params = init_params::<T>(&arch, arch.init, derive_seed(seed, "init"))?;
                let traj = Trajectory::create(&arch, g.out_dir.join(format!("seed-{seed}/target")))?;
                let out = train_into(
                    &arch,
                    params,
                    &MaskSet::ones(&arch),
                    FreezePolicy::None,
                    task,
                    &cfg.hyper.target,
                    derive_seed(seed, "target-train"),
                    traj,
                )?;
                (cfg.target_name(), out.report)
            }
        };
        print_report(&format!("seed {seed}"), &report);
        rows.push(RunRow::standalone(&cfg.arch, &task_name, seed, &report));
        reports.push(report);
    }
    write_rows(g.out_dir.join("train.csv"), &rows)?;
    Ok(Outcome::from_reports(&reports))
}

fn transfer_cmd<T: Scalar>(g: &Global, config: &Path) -> Result<Outcome> {
    let (mut cfg, tasks) = prepared(config)?;
    cfg.seeds = seeds(g, &cfg);
    let opts = RunOptions {
        workers: g.workers,
        out_dir: Some(g.out_dir.clone()),
    };
    let result = ticket_transfer::<T>(&cfg, &tasks, &opts)?;
    let rows = result.rows();
    emit_report(&rows, &g.out_dir)?;
    for s in &result.seeds {
        print_report(&format!("seed {} dense", s.seed), &s.baseline);
        for c in &s.cells {
            print_report(&format!("seed {} level {} {}", s.seed, c.level, c.reset), &c.report);
        }
    }
    println!("wrote {} rows to {}", rows.len(), g.out_dir.join(RUNS_FILE).display());
    let reports = result
        .seeds
        .iter()
        .flat_map(|s| std::iter::once(&s.baseline).chain(s.cells.iter().map(|c| &c.report)));
    Ok(Outcome::from_reports(reports))
}

fn prune_cmd<T: Scalar>(g: &Global, config: &Path, ck: Option<&Path>) -> Result<Outcome> {
    let (cfg, tasks) = prepared(config)?;
    let arch = &tasks.source_arch;
    let (params, dir) = match ck {
        Some(path) => (checkpoint::load::<T>(path, arch)?, g.out_dir.join("masks")),
        None => {
            let seed = seeds(g, &cfg)[0];
            let seed_dir = g.out_dir.join(format!("seed-{seed}"));
            let traj = Trajectory::<T>::open(arch, seed_dir.join("source"))?;
            (traj.best_checkpoint()?.1, seed_dir.join("masks"))
        }
    };
    let ones = MaskSet::ones(arch);
    let rounds = cfg.schedule.run(&params, &ones)?;
    create_dir(&dir)?;
    for level in cfg.levels() {
        let masks = if level == 0 { &ones } else { &rounds[level as usize - 1] };
        let path = dir.join(format!("level-{level:02}.ltmk"));
        masks.save(&path)?;
        println!(
            "level {level:>2}: prunable density {:.4}, whole-model density {:.4} -> {}",
            masks.density(DensityScope::Prunable),
            masks.density(DensityScope::whole_model(&params)),
            path.display()
        );
    }
    Ok(Outcome::Done)
}

fn baseline_cmd<T: Scalar>(g: &Global, config: &Path, kind: &str) -> Result<Outcome> {
    let kind: BaselineKind = kind.parse()?;
    let (cfg, tasks) = prepared(config)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for seed in seeds(g, &cfg) {
        let report = baseline_run::<T>(kind, &tasks.target, &cfg.hyper.target, seed)?;
        print_report(&format!("{kind} seed {seed}"), &report);
        rows.push(RunRow::standalone(&kind.to_string(), &cfg.target_name(), seed, &report));
        reports.push(report);
    }
    create_dir(&g.out_dir)?;
    write_rows(g.out_dir.join(format!("baseline-{kind}.csv")), &rows)?;
    Ok(Outcome::from_reports(&reports))
}

fn report_cmd(g: &Global, inputs: &[PathBuf]) -> Result<Outcome> {
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_rows(path)?);
    }
    emit_report(&rows, &g.out_dir)?;
    println!("merged {} rows from {} file(s) into {}", rows.len(), inputs.len(), g.out_dir.display());
    Ok(Outcome::Done)
}

fn gen_data_cmd(g: &Global, a: &GenData) -> Result<Outcome> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        shape: a.shape,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        noise: a.noise,
        jitter: a.jitter,
        contrast: a.contrast,
        motif_offset: a.motif_offset,
    };
    let task = TaskSpec::synthetic("synthetic", &spec, g.seed.unwrap_or(0), false)?;
    task.save_dir(&g.out_dir)?;
    println!(
        "wrote {} train / {} val / {} test images of {:?} to {}",
        task.train.len(),
        task.val.len(),
        task.test.len(),
        spec.shape,
        g.out_dir.display()
    );
    Ok(Outcome::Done)
}
