use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorenz_sciml::config::{ExperimentConfig, ModelKind};
use lorenz_sciml::dynamics::simulate_truth_with;
use lorenz_sciml::error::Error;
use lorenz_sciml::harness::{self, ExperimentReport, RunStatus};

/// Neural ODE and UDE experiments on the Lorenz system.
#[derive(Parser)]
#[command(name = "lorenz-sciml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the reference system and write `trajectory.csv`.
    Simulate(RunArgs),
    /// Train a neural ODE, forecast and score it.
    TrainNode(RunArgs),
    /// Train a UDE, forecast, score and recover its missing terms.
    TrainUde(RunArgs),
    /// Run every arm of a config's `[sweep]` grid.
    Sweep(RunArgs),
    /// Tabulate a neural ODE report against a UDE report.
    Compare {
        /// Report directory of the neural ODE run.
        node_report: PathBuf,
        /// Report directory of the UDE run.
        ude_report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML). Defaults to the matching baseline.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel sweep arms.
    #[arg(long)]
    workers: Option<usize>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BLOWUP: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse(_) | Error::Io { .. } => EXIT_CONFIG,
        Error::Blowup(_) => EXIT_BLOWUP,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Contract(_) => EXIT_FAILURE,
    }
}

fn load_config(args: &RunArgs, fallback: ExperimentConfig) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => fallback,
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn simulate(args: &RunArgs) -> Result<u8, Error> {
    let cfg = load_config(args, ExperimentConfig::node_baseline())?;
    let (t0, t1) = cfg.train_span();
    let traj = simulate_truth_with(cfg.u0(), &cfg.lorenz_params(), t0, t1, &cfg.grid())?;
    let out = harness::prepare_output_dir(&args.out, args.overwrite)?;
    traj.write_csv(&out.join("trajectory.csv"))?;
    println!("wrote {} samples to {}", traj.len(), out.join("trajectory.csv").display());
    Ok(0)
}

fn train(args: &RunArgs, kind: ModelKind) -> Result<u8, Error> {
    let fallback = match kind {
        ModelKind::Node => ExperimentConfig::node_baseline(),
        ModelKind::Ude => ExperimentConfig::ude_baseline(),
    };
    let cfg = load_config(args, fallback)?;
    if cfg.kind != kind {
        return Err(Error::Config {
            key: "kind".into(),
            message: format!("config describes a `{}` experiment, not `{kind}`", cfg.kind),
        });
    }
    let out = harness::prepare_output_dir(&args.out, args.overwrite)?;
    let artifacts = harness::run_experiment(&cfg)?;
    harness::write_artifacts(&out, &artifacts)?;
    print_summary(&artifacts.report);
    Ok(match &artifacts.report.status {
        RunStatus::Completed => 0,
        RunStatus::Diverged { message } => {
            eprintln!("error: {message}");
            EXIT_DIVERGED
        }
        RunStatus::Failed { message } => {
            eprintln!("error: {message}");
            EXIT_FAILURE
        }
    })
}

fn print_summary(r: &ExperimentReport) {
    println!(
        "{}: initial loss {:.6e}, final loss {:.6e} after {} iterations ({:.1}s)",
        r.name, r.initial_loss, r.final_loss, r.iterations_run, r.wall_clock_secs
    );
    if let Some(b) = &r.breakdown {
        match b.breakdown_time {
            Some(t) => println!("  forecast breaks down at t = {t:.2} (threshold {})", b.threshold),
            None => println!("  no forecast breakdown within the horizon (threshold {})", b.threshold),
        }
    }
    if let Some(terms) = &r.recovered_terms {
        for (i, t) in terms.iter().enumerate() {
            println!("  NN{} normalized RMSE {:.4}", i + 1, t.normalized_rmse);
        }
    }
}

fn sweep(args: &RunArgs) -> Result<u8, Error> {
    let path = args.config.as_ref().ok_or_else(|| Error::Config {
        key: "--config".into(),
        message: "sweep needs a config with a [sweep] section".into(),
    })?;
    let cfg = load_config(args, ExperimentConfig::default())?;
    let grid = cfg.expand_sweep()?;
    let workers = args.workers.or(cfg.sweep_workers()).unwrap_or(1);
    let out = harness::prepare_output_dir(&args.out, args.overwrite)?;
    eprintln!("{}: {} arms on {workers} worker(s)", path.display(), grid.len());
    let arms = harness::run_sweep(&grid, workers)?;
    for a in &arms {
        let dir = out.join(&a.report.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        harness::write_artifacts(&dir, a)?;
        print_summary(&a.report);
    }
    let summary = out.join("summary.csv");
    std::fs::write(&summary, harness::sweep_summary_csv(&arms))
        .map_err(|e| Error::Io { path: summary, source: e })?;
    Ok(0)
}

fn compare(node: &Path, ude: &Path, out: Option<&Path>, overwrite: bool) -> Result<u8, Error> {
    let node = ExperimentReport::load(node)?;
    let ude = ExperimentReport::load(ude)?;
    let comparison = harness::compare_models(&node, &ude)?;
    let csv = comparison.to_csv();
    print!("{csv}");
    if let Some(out) = out {
        let out = harness::prepare_output_dir(out, overwrite)?;
        let path = out.join("comparison.csv");
        std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
        let path = out.join("comparison.json");
        let json = serde_json::to_string_pretty(&comparison).expect("comparison serializes");
        std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::TrainNode(a) => train(a, ModelKind::Node),
        Command::TrainUde(a) => train(a, ModelKind::Ude),
        Command::Sweep(a) => sweep(a),
        Command::Compare {
            node_report,
            ude_report,
            out,
            overwrite,
        } => compare(node_report, ude_report, out.as_deref(), *overwrite),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
