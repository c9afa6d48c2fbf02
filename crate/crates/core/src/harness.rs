//! Experiment orchestration: noisy targets, forecast breakdown, sweeps and
//! the report directory layout.
//!
//! A report directory holds
//!
//! | file                        | contents                                   |
//! |-----------------------------|--------------------------------------------|
//! | `report.json`               | config snapshot and scalar results         |
//! | `config.toml`               | the config, re-runnable as is              |
//! | `loss.csv`                  | `iter,loss`                                |
//! | `trajectory_truth.csv`      | `t,x,y,z`, truth over the forecast span    |
//! | `trajectory_train.csv`      | `t,x,y,z`, training targets (noisy if set) |
//! | `trajectory_pred.csv`       | `t,x,y,z`, model over the training span    |
//! | `trajectory_forecast.csv`   | `t,x,y,z`, model over the forecast span    |
//! | `breakdown.csv`             | `t,normalized_error`                       |
//! | `residuals.csv`             | `t,nn1,g1,nn2,g2,nn3,g3` (UDE only)        |
//! | `checkpoint.json`           | `{"spec": …, "theta": […]}`                |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::trajectory_loss;
use crate::config::{ExperimentConfig, ModelKind};
use crate::dynamics::{fmt17, simulate_truth_with, State3, Trajectory};
use crate::error::{Error, Result};
use crate::net::{Checkpoint, FlatParams};
use crate::node::{self, NodeProblem};
use crate::train::TrainOutcome;
use crate::ude::{self, ResidualSamples, TermError, UdeProblem};

/// Additive Gaussian noise on the training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation, in state units.
    pub level: f64,
    pub seed: u64,
}

/// Perturbs every component of every sample with an independent
/// `N(0, level²)` draw. Times are unchanged.
pub fn add_noise(traj: &Trajectory, cfg: &NoiseConfig) -> Result<Trajectory> {
    if !(cfg.level >= 0.0 && cfg.level.is_finite()) {
        return Err(Error::contract(format!("noise level must be >= 0, got {}", cfg.level)));
    }
    if cfg.level == 0.0 {
        return Ok(traj.clone());
    }
    let normal = Normal::new(0.0, cfg.level).expect("finite positive std-dev");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    traj.map_states(|_, s| {
        State3([
            s[0] + normal.sample(&mut rng),
            s[1] + normal.sample(&mut rng),
            s[2] + normal.sample(&mut rng),
        ])
    })
}

/// Where a forecast stops tracking the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub train_end: f64,
    /// First saved time whose normalized error exceeds `threshold`.
    pub breakdown_time: Option<f64>,
    pub threshold: f64,
    /// Normalization: bounding-box diagonal of the truth.
    pub scale: f64,
    pub times: Vec<f64>,
    /// `‖pred(t) − truth(t)‖₂ / scale`; `inf` past a forecast blowup.
    #[serde(with = "nonfinite::vec")]
    pub error_series: Vec<f64>,
}

impl BreakdownReport {
    /// `(breakdown_time − train_end) / train_end`, or `None` when the forecast
    /// never broke down within its horizon.
    pub fn beyond_training_ratio(&self) -> Option<f64> {
        self.breakdown_time.map(|t| (t - self.train_end) / self.train_end)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,normalized_error\n");
        for (t, e) in self.times.iter().zip(&self.error_series) {
            let _ = writeln!(out, "{},{}", fmt17(*t), fmt_loss(*e));
        }
        out
    }
}

/// Normalized forecast error on a shared grid and the first threshold
/// crossing.
pub fn detect_breakdown(
    pred: &Trajectory,
    truth: &Trajectory,
    threshold: f64,
    train_end: f64,
) -> Result<BreakdownReport> {
    if !pred.same_grid(truth) {
        return Err(Error::contract(format!(
            "prediction grid ({} samples) does not match truth grid ({} samples)",
            pred.len(),
            truth.len()
        )));
    }
    breakdown_with_gap(pred, truth, threshold, train_end)
}

/// Like [`detect_breakdown`], but `pred` may stop early (a forecast that blew
/// up); the missing samples count as infinite error.
pub fn breakdown_with_gap(
    pred: &Trajectory,
    truth: &Trajectory,
    threshold: f64,
    train_end: f64,
) -> Result<BreakdownReport> {
    if !(threshold > 0.0) {
        return Err(Error::contract(format!("threshold must be > 0, got {threshold}")));
    }
    if pred.len() > truth.len() || !truth.times()[..pred.len()]
        .iter()
        .zip(pred.times())
        .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs()))
    {
        return Err(Error::contract("prediction times are not a prefix of the truth grid"));
    }
    let scale = truth.bounding_box_diagonal();
    let error_series: Vec<f64> = (0..truth.len())
        .map(|k| match pred.states().get(k) {
            Some(p) => {
                let d = (*p - truth.states()[k]).norm();
                if scale > 0.0 {
                    d / scale
                } else if d == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        })
        .collect();
    let breakdown_time = error_series
        .iter()
        .position(|&e| e > threshold)
        .map(|k| truth.times()[k]);
    Ok(BreakdownReport {
        train_end,
        breakdown_time,
        threshold,
        scale,
        times: truth.times().to_vec(),
        error_series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { message: String },
    Failed { message: String },
}

/// Scalar results of one experiment plus the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: ModelKind,
    pub seed: u64,
    pub init_scheme: String,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    #[serde(with = "nonfinite")]
    pub initial_loss: f64,
    /// Best training loss, against the (possibly noisy) targets.
    #[serde(with = "nonfinite")]
    pub final_loss: f64,
    /// SSE of the trained rollout against the noise-free truth.
    pub clean_loss: Option<f64>,
    pub iterations_run: usize,
    pub adam_iterations: usize,
    pub bfgs_iterations: usize,
    pub bfgs_line_search_failed: bool,
    pub breakdown: Option<BreakdownReport>,
    /// Time at which the forecast rollout blew up, if it did.
    pub forecast_blowup_time: Option<f64>,
    pub recovered_terms: Option<[TermError; 3]>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut report = Self::from_json(&text)?;
        let loss_path = dir.join("loss.csv");
        if let Ok(loss) = std::fs::read_to_string(&loss_path) {
            report.history = parse_loss_csv(&loss)?;
        }
        Ok(report)
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub report: ExperimentReport,
    /// Noise-free truth over the forecast span.
    pub truth: Trajectory,
    /// Training targets (truth over the training span, plus any noise).
    pub targets: Trajectory,
    pub prediction: Option<Trajectory>,
    /// Possibly shorter than `truth` if the rollout blew up.
    pub forecast: Option<Trajectory>,
    pub residuals: Option<ResidualSamples>,
    pub checkpoint: Option<Checkpoint>,
}

enum Problem {
    Node(NodeProblem),
    Ude(UdeProblem),
}

impl Problem {
    fn build(cfg: &ExperimentConfig, targets: Trajectory) -> Result<Problem> {
        let spec = cfg.mlp_spec();
        let (u0, span, grid) = (cfg.u0(), cfg.train_span(), cfg.grid());
        Ok(match cfg.kind {
            ModelKind::Node => Problem::Node(NodeProblem::new(spec, u0, span, grid, targets)?),
            ModelKind::Ude => Problem::Ude(UdeProblem::new(
                spec,
                cfg.model.layout,
                cfg.model.input_mode,
                cfg.model.z_equation,
                cfg.lorenz_params(),
                u0,
                span,
                grid,
                targets,
            )?),
        })
    }

    fn train(&self, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
        let tc = cfg.train_config();
        match self {
            Problem::Node(p) => node::train_node(p, &tc),
            Problem::Ude(p) => ude::train_ude(p, &tc),
        }
    }

    fn rollout(&self, theta: &FlatParams, t1: f64) -> Result<Trajectory> {
        match self {
            Problem::Node(p) => node::forecast(p, theta, t1),
            Problem::Ude(p) => ude::ude_forecast(p, theta, t1),
        }
    }
}

/// Builds the truth, trains, forecasts and scores one experiment.
///
/// Only an invalid config or a truth-simulation blowup is an `Err`; training
/// divergence and other failures are recorded in the report's status.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let (t0, train_end) = cfg.train_span();
    let truth = simulate_truth_with(cfg.u0(), &cfg.lorenz_params(), t0, cfg.data.forecast_t1, &cfg.grid())?;
    let clean = truth.truncate_to(train_end);
    let targets = add_noise(
        &clean,
        &NoiseConfig {
            level: cfg.data.noise_level,
            seed: cfg.noise_seed(),
        },
    )?;

    let mut report = ExperimentReport {
        name: cfg.name.clone(),
        kind: cfg.kind,
        seed: cfg.train.seed,
        init_scheme: "glorot_uniform".into(),
        status: RunStatus::Completed,
        config: cfg.clone(),
        initial_loss: f64::NAN,
        final_loss: f64::INFINITY,
        clean_loss: None,
        iterations_run: 0,
        adam_iterations: 0,
        bfgs_iterations: 0,
        bfgs_line_search_failed: false,
        breakdown: None,
        forecast_blowup_time: None,
        recovered_terms: None,
        wall_clock_secs: 0.0,
        history: Vec::new(),
    };
    let mut artifacts = Artifacts {
        report: report.clone(),
        truth: truth.clone(),
        targets: targets.clone(),
        prediction: None,
        forecast: None,
        residuals: None,
        checkpoint: None,
    };

    let problem = Problem::build(cfg, targets)?;
    let outcome = match problem.train(cfg) {
        Ok(o) => o,
        Err(e) => {
            if let Error::Diverged { history, .. } = &e {
                report.history = history.clone();
                report.iterations_run = history.len();
                report.initial_loss = history.first().copied().unwrap_or(f64::NAN);
                report.status = RunStatus::Diverged { message: e.to_string() };
            } else {
                report.status = RunStatus::Failed { message: e.to_string() };
            }
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            artifacts.report = report;
            return Ok(artifacts);
        }
    };

    report.initial_loss = outcome.initial_loss();
    report.final_loss = outcome.final_loss;
    report.iterations_run = outcome.history.len();
    report.adam_iterations = outcome.adam_iterations;
    report.bfgs_iterations = outcome.bfgs_iterations;
    report.bfgs_line_search_failed = outcome.bfgs_line_search_failed;
    report.history = outcome.history.clone();

    let prediction = problem.rollout(&outcome.theta, train_end).ok();
    if let Some(pred) = &prediction {
        report.clean_loss = trajectory_loss(pred, &clean).ok();
    }
    let forecast = match problem.rollout(&outcome.theta, cfg.data.forecast_t1) {
        Ok(f) => f,
        Err(Error::Blowup(b)) => {
            report.forecast_blowup_time = Some(b.time);
            b.partial
        }
        Err(e) => return Err(e),
    };
    report.breakdown = Some(breakdown_with_gap(&forecast, &truth, cfg.breakdown.threshold, train_end)?);

    if let Problem::Ude(p) = &problem {
        // recovery is judged against the noise-free states
        let clean_problem = p.with_truth(clean.clone())?;
        let residuals = ude::recover_terms(&clean_problem, &outcome.theta)?;
        report.recovered_terms = Some(residuals.term_errors());
        artifacts.residuals = Some(residuals);
    }

    artifacts.checkpoint = Some(Checkpoint {
        spec: cfg.mlp_spec(),
        theta: outcome.theta,
    });
    artifacts.prediction = prediction;
    artifacts.forecast = Some(forecast);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    artifacts.report = report;
    Ok(artifacts)
}

/// JSON has no infinities; diverged runs write them as strings.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else {
            Repr::Text(super::fmt_loss(v))
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(|_| E::custom(format!("not a number: `{t}`"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| to_repr(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

pub(crate) fn fmt_loss(v: f64) -> String {
    if v.is_finite() {
        fmt17(v)
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("iter,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_loss(*l));
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = l
                .split(',')
                .nth(1)
                .ok_or_else(|| Error::Parse(format!("bad loss row `{l}`")))?;
            v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad loss `{v}`: {e}")))
        })
        .collect()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the report directory. The directory must exist.
pub fn write_artifacts(dir: &Path, a: &Artifacts) -> Result<()> {
    write(dir, "report.json", &a.report.to_json())?;
    write(dir, "config.toml", &a.report.config.to_toml())?;
    write(dir, "loss.csv", &loss_csv(&a.report.history))?;
    write(dir, "trajectory_truth.csv", &a.truth.to_csv())?;
    write(dir, "trajectory_train.csv", &a.targets.to_csv())?;
    if let Some(p) = &a.prediction {
        write(dir, "trajectory_pred.csv", &p.to_csv())?;
    }
    if let Some(f) = &a.forecast {
        write(dir, "trajectory_forecast.csv", &f.to_csv())?;
    }
    if let Some(b) = &a.report.breakdown {
        write(dir, "breakdown.csv", &b.to_csv())?;
    }
    if let Some(r) = &a.residuals {
        write(dir, "residuals.csv", &r.to_csv())?;
    }
    if let Some(c) = &a.checkpoint {
        write(dir, "checkpoint.json", &c.to_json())?;
    }
    Ok(())
}

/// Runs every arm on a pool of `workers` threads and returns the results
/// sorted by final loss. A failing arm is recorded in its report's status
/// and never aborts the sweep.
pub fn run_sweep(grid: &[ExperimentConfig], workers: usize) -> Result<Vec<Artifacts>> {
    if grid.is_empty() {
        return Err(Error::Config {
            key: "sweep".into(),
            message: "the sweep grid is empty".into(),
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::contract(e.to_string()))?;
    let mut results: Vec<Artifacts> = pool.install(|| {
        grid.par_iter()
            .map(|cfg| match run_experiment(cfg) {
                Ok(a) => a,
                Err(e) => failed_arm(cfg, e),
            })
            .collect()
    });
    results.sort_by(|a, b| a.report.final_loss.total_cmp(&b.report.final_loss));
    Ok(results)
}

fn failed_arm(cfg: &ExperimentConfig, e: Error) -> Artifacts {
    let empty = Trajectory::default();
    Artifacts {
        report: ExperimentReport {
            name: cfg.name.clone(),
            kind: cfg.kind,
            seed: cfg.train.seed,
            init_scheme: "glorot_uniform".into(),
            status: RunStatus::Failed { message: e.to_string() },
            config: cfg.clone(),
            initial_loss: f64::NAN,
            final_loss: f64::INFINITY,
            clean_loss: None,
            iterations_run: 0,
            adam_iterations: 0,
            bfgs_iterations: 0,
            bfgs_line_search_failed: false,
            breakdown: None,
            forecast_blowup_time: None,
            recovered_terms: None,
            wall_clock_secs: 0.0,
            history: Vec::new(),
        },
        truth: empty.clone(),
        targets: empty,
        prediction: None,
        forecast: None,
        residuals: None,
        checkpoint: None,
    }
}

/// `summary.csv` of a sweep: one row per arm in the given order.
pub fn sweep_summary_csv(arms: &[Artifacts]) -> String {
    let mut out = String::from("name,activation,hidden,lr,optimizer,iterations,final_loss,breakdown_time,wall_clock_secs,status\n");
    for a in arms {
        let r = &a.report;
        let c = &r.config;
        let status = match &r.status {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Failed { .. } => "failed",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3},{}",
            r.name,
            c.model.activation,
            c.model.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"),
            c.train.lr,
            c.train.optimizer,
            c.train.iterations,
            fmt_loss(r.final_loss),
            r.breakdown
                .as_ref()
                .and_then(|b| b.breakdown_time)
                .map_or("none".to_string(), |t| format!("{t:.2}")),
            r.wall_clock_secs,
            status
        );
    }
    out
}

/// How far past the end of training a forecast stays usable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeyondTraining {
    /// `(breakdown_time − train_end) / train_end`.
    Ratio(f64),
    /// No breakdown before the forecast horizon.
    BeyondHorizon,
}

impl std::fmt::Display for BeyondTraining {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BeyondTraining::Ratio(r) => write!(f, "{r:.4}"),
            BeyondTraining::BeyondHorizon => f.write_str("beyond_horizon"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub final_loss: f64,
    pub train_end: f64,
    pub breakdown_time: Option<f64>,
    pub beyond_training: BeyondTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,final_loss,train_end,breakdown_time,beyond_training\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.model,
                fmt_loss(r.final_loss),
                r.train_end,
                r.breakdown_time.map_or("none".into(), |t| t.to_string()),
                r.beyond_training
            );
        }
        out
    }
}

fn comparison_row(label: &str, r: &ExperimentReport) -> Result<ComparisonRow> {
    let b = r
        .breakdown
        .as_ref()
        .ok_or_else(|| Error::contract(format!("report `{}` has no breakdown data", r.name)))?;
    Ok(ComparisonRow {
        model: label.to_string(),
        final_loss: r.final_loss,
        train_end: b.train_end,
        breakdown_time: b.breakdown_time,
        beyond_training: b
            .beyond_training_ratio()
            .map_or(BeyondTraining::BeyondHorizon, BeyondTraining::Ratio),
    })
}

/// Final losses, breakdown times and beyond-training ratios side by side.
pub fn compare_models(node_report: &ExperimentReport, ude_report: &ExperimentReport) -> Result<Comparison> {
    Ok(Comparison {
        rows: vec![
            comparison_row("neural_ode", node_report)?,
            comparison_row("ude", ude_report)?,
        ],
    })
}

/// Creates `dir`, refusing a non-empty directory unless `overwrite`.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<PathBuf> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Config {
                key: "--out".into(),
                message: format!("{} is not empty; pass --overwrite to reuse it", dir.display()),
            });
        }
        if non_empty {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
