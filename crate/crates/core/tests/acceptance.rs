//! Acceptance suite: one PASS/FAIL line per headline criterion.
//!
//! The expensive training runs (tens of minutes on one core) are run once
//! and shared between the criteria that judge them. Reports land in
//! `$CARGO_TARGET_TMPDIR/acceptance/`.
//!
//! A failing criterion is reported, not hidden; the process exits non-zero
//! on failures only when `ACCEPTANCE_STRICT` is set, so the verdict lines
//! stay visible alongside the rest of `cargo test`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lorenz_sciml::autodiff::{central_difference_gradient, loss_and_grad, relative_errors, rollout_loss};
use lorenz_sciml::config::ExperimentConfig;
use lorenz_sciml::dynamics::{lorenz_rhs, LorenzParams, State3, DEFAULT_U0};
use lorenz_sciml::harness::{self, Artifacts, ExperimentReport, RunStatus};
use lorenz_sciml::integrate::{integrate, IntegratorConfig};
use lorenz_sciml::net::{Activation, MlpSpec};
use lorenz_sciml::node::NodeProblem;
use lorenz_sciml::ude::{analytic_targets, ude_rhs_from_outputs, ZEquation, InputMode, NetLayout, UdeProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdicts {
    lines: Vec<(bool, String)>,
}

impl Verdicts {
    fn record(&mut self, name: &str, ok: bool, detail: String, started: Instant) {
        let line = format!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((ok, line));
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).expect("shipped config loads")
}

fn reports_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn run_and_save(cfg: &ExperimentConfig) -> Artifacts {
    let started = Instant::now();
    let a = harness::run_experiment(cfg).expect("experiment runs");
    let dir = harness::prepare_output_dir(&reports_dir().join(&cfg.name), true).unwrap();
    harness::write_artifacts(&dir, &a).unwrap();
    eprintln!(
        "  [{}] final loss {:.6e} after {} iterations, {:.0}s",
        cfg.name,
        a.report.final_loss,
        a.report.iterations_run,
        started.elapsed().as_secs_f64()
    );
    a
}

fn completed(r: &ExperimentReport) -> bool {
    r.status == RunStatus::Completed
}

fn fmt_bt(t: Option<f64>) -> String {
    t.map_or("none".into(), |t| format!("{t:.1}"))
}

fn gradient_correctness(v: &mut Verdicts) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let p = LorenzParams::CANONICAL;
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let n_configs = 24;
    for case in 0..n_configs {
        let activation = Activation::ALL[rng.random_range(0..3)];
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=8)).collect();
        let t1 = [0.2, 0.5, 1.0][rng.random_range(0..3)];
        let save_dt = [0.05, 0.1][rng.random_range(0..2)];
        let grid = IntegratorConfig::new(0.01, save_dt).unwrap();
        let seed = rng.random::<u64>();
        let (label, grad, fd) = if case % 2 == 0 {
            let spec = MlpSpec::new(3, hidden.clone(), 3, activation).unwrap();
            let pr = NodeProblem::lorenz(spec, &p, DEFAULT_U0, (0.0, t1), grid).unwrap();
            let theta = pr.init_params(seed);
            let mut f = pr.field();
            let rep = loss_and_grad(&mut f, &theta.0, &pr.rollout(), &pr.truth).unwrap();
            let fd = central_difference_gradient(
                |th| rollout_loss(&mut f, th, &pr.rollout(), &pr.truth).unwrap(),
                &theta.0,
                1e-5,
            );
            (format!("node {activation} {hidden:?} t1={t1}"), rep.gradient, fd)
        } else {
            let mode = [InputMode::State, InputMode::TimeAndState][rng.random_range(0..2)];
            let form = [ZEquation::Verbatim, ZEquation::Corrected][rng.random_range(0..2)];
            let layout = [NetLayout::Shared, NetLayout::Separate][rng.random_range(0..2)];
            let spec = MlpSpec::new(mode.width(), hidden.clone(), 3, activation).unwrap();
            let pr = UdeProblem::lorenz(spec, mode, form, p, DEFAULT_U0, (0.0, t1), grid)
                .unwrap()
                .with_layout(layout);
            let theta = pr.init_params(seed);
            let mut f = pr.field();
            let rep = loss_and_grad(&mut f, &theta.0, &pr.rollout(), &pr.truth).unwrap();
            let fd = central_difference_gradient(
                |th| rollout_loss(&mut f, th, &pr.rollout(), &pr.truth).unwrap(),
                &theta.0,
                1e-5,
            );
            (format!("ude {activation} {hidden:?} {mode:?}/{form:?}/{layout:?} t1={t1}"), rep.gradient, fd)
        };
        // components far below the gradient's scale are compared on that scale
        let scale = fd.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let err = relative_errors(&grad, &fd, 1e-6 * scale).into_iter().fold(0.0, f64::max);
        if err > worst {
            worst = err;
            worst_case = label;
        }
    }
    v.record(
        "gradient correctness",
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {n_configs} configs (worst: {worst_case}); need < 1e-4"),
        started,
    );
}

fn dynamics_correctness(v: &mut Verdicts) {
    let started = Instant::now();
    let p = LorenzParams::CANONICAL;
    let residual = p
        .fixed_points()
        .iter()
        .map(|fp| lorenz_rhs(fp, &p).norm())
        .fold(0.0, f64::max);
    let decay = |_t: f64, u: &State3| *u * -1.0;
    let err = |h: f64| {
        let cfg = IntegratorConfig::new(h, 1.0).unwrap();
        let end = integrate(&decay, State3([1.0, 1.0, 1.0]), 0.0, 1.0, &cfg).unwrap();
        (end.states().last().unwrap()[0] - (-1.0f64).exp()).abs()
    };
    let ratio = err(0.1) / err(0.05);
    v.record(
        "dynamics correctness",
        residual <= 1e-12 && (8.0..=32.0).contains(&ratio),
        format!("fixed-point residual {residual:.1e} (need <= 1e-12); RK4 halving ratio {ratio:.2} (need [8, 32])"),
        started,
    );
}

fn identification_identity(v: &mut Verdicts) {
    let started = Instant::now();
    let p = LorenzParams::CANONICAL;
    let mut worst = 0.0f64;
    for form in [ZEquation::Verbatim, ZEquation::Corrected] {
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let s = State3([-20.0 + 40.0 * i as f64 / 9.0, -20.0 + 40.0 * j as f64 / 9.0, 50.0 * k as f64 / 9.0]);
                    let g = analytic_targets(&s, &p, form);
                    let d = (ude_rhs_from_outputs(&s, &g, &p, form) - lorenz_rhs(&s, &p)).norm();
                    worst = worst.max(d);
                }
            }
        }
    }
    v.record(
        "identification identity",
        worst <= 1e-10,
        format!("max |ude_rhs(targets) - lorenz_rhs| = {worst:.1e} over 1000 states x 2 forms; need <= 1e-10"),
        started,
    );
}

fn node_smoke(v: &mut Verdicts) -> ExperimentReport {
    let started = Instant::now();
    let mut cfg = load("node_baseline");
    cfg.name = "node_smoke".into();
    cfg.train.iterations = 2000;
    let a = run_and_save(&cfg);
    let r = a.report;
    let factor = r.initial_loss / r.final_loss;
    v.record(
        "neural ODE smoke (2000 iterations)",
        completed(&r) && factor > 50.0 && started.elapsed().as_secs_f64() < 120.0,
        format!(
            "loss {:.1} -> {:.1}, reduction {factor:.1}x (need > 50x in < 2 min)",
            r.initial_loss, r.final_loss
        ),
        started,
    );
    r
}

fn node_baseline(v: &mut Verdicts) -> ExperimentReport {
    let started = Instant::now();
    let r = run_and_save(&load("node_baseline")).report;
    let frac = r.final_loss / r.initial_loss;
    v.record(
        "neural ODE baseline",
        completed(&r) && r.final_loss < 10.0 && frac < 0.01,
        format!(
            "final SSE {:.4} after {} iterations (need < 10); {:.3}% of initial {:.1} (need < 1%)",
            r.final_loss,
            r.iterations_run,
            100.0 * frac,
            r.initial_loss
        ),
        started,
    );
    r
}

fn ude_baseline(v: &mut Verdicts, node: &ExperimentReport) -> ExperimentReport {
    let started = Instant::now();
    let r = run_and_save(&load("ude_baseline")).report;
    v.record(
        "UDE baseline",
        completed(&r) && r.final_loss < 0.1 && r.final_loss < node.final_loss,
        format!(
            "final SSE {:.4e} ({} Adam + {} BFGS iterations; need < 0.1); neural ODE {:.4} (need UDE < neural ODE)",
            r.final_loss, r.adam_iterations, r.bfgs_iterations, node.final_loss
        ),
        started,
    );
    r
}

fn activation_ordering(v: &mut Verdicts) {
    let started = Instant::now();
    let cfg = load("sweep_activations");
    let grid = cfg.expand_sweep().unwrap();
    let arms = harness::run_sweep(&grid, cfg.sweep_workers().unwrap_or(1)).unwrap();
    let dir = harness::prepare_output_dir(&reports_dir().join("sweep_activations"), true).unwrap();
    for a in &arms {
        let d = dir.join(&a.report.name);
        std::fs::create_dir_all(&d).unwrap();
        harness::write_artifacts(&d, a).unwrap();
    }
    std::fs::write(dir.join("summary.csv"), harness::sweep_summary_csv(&arms)).unwrap();
    let losses: Vec<String> = arms
        .iter()
        .map(|a| format!("{}={:.2}", a.report.config.model.activation, a.report.final_loss))
        .collect();
    let ok = arms.len() == 3
        && arms[0].report.config.model.activation == Activation::Sigmoid
        && arms[0].report.final_loss < arms[1].report.final_loss;
    v.record(
        "activation ordering",
        ok,
        format!("final losses at 5000 iterations: {} (need sigmoid strictly lowest)", losses.join(", ")),
        started,
    );
}

fn term_recovery(v: &mut Verdicts, ude: &ExperimentReport) {
    let started = Instant::now();
    let (ok, detail) = match &ude.recovered_terms {
        Some(terms) => (
            terms.iter().all(|t| t.normalized_rmse < 0.1),
            format!(
                "normalized RMSE NN1 {:.4}, NN2 {:.4}, NN3 {:.4} (need each < 0.1)",
                terms[0].normalized_rmse, terms[1].normalized_rmse, terms[2].normalized_rmse
            ),
        ),
        None => (false, "no recovered terms in the UDE report".into()),
    };
    v.record("missing-term recovery", ok, detail, started);
}

fn breakdown_windows(v: &mut Verdicts, node: &ExperimentReport, ude: &ExperimentReport) {
    let started = Instant::now();
    let bt = |r: &ExperimentReport| r.breakdown.as_ref().and_then(|b| b.breakdown_time);
    let node_bt = bt(node);
    let ude_bt = bt(ude);
    let node_ok = node_bt.is_some_and(|t| t > 10.0 && t <= 15.0);
    let ude_ok = ude_bt.is_some_and(|t| t > 8.0 && t <= 15.0);
    v.record(
        "breakdown existence",
        node_ok && ude_ok,
        format!(
            "neural ODE breaks down at {} (need (10, 15]); UDE at {} (need (8, 15])",
            fmt_bt(node_bt),
            fmt_bt(ude_bt)
        ),
        started,
    );
}

fn noise_degradation(v: &mut Verdicts, clean: &ExperimentReport) {
    let started = Instant::now();
    let noisy = run_and_save(&load("node_noise")).report;
    let bt = |r: &ExperimentReport| {
        r.breakdown
            .as_ref()
            .and_then(|b| b.breakdown_time)
            .unwrap_or(f64::INFINITY)
    };
    let ok = completed(&noisy)
        && noisy.config.train == clean.config.train
        && noisy.final_loss > clean.final_loss
        && bt(&noisy) <= bt(clean);
    v.record(
        "noise degradation",
        ok,
        format!(
            "noisy final {:.4} vs clean {:.4} (need noisy > clean); breakdown noisy {} vs clean {} (need noisy <= clean)",
            noisy.final_loss,
            clean.final_loss,
            fmt_bt(noisy.breakdown.as_ref().and_then(|b| b.breakdown_time)),
            fmt_bt(clean.breakdown.as_ref().and_then(|b| b.breakdown_time)),
        ),
        started,
    );
}

fn determinism(v: &mut Verdicts, smoke: &ExperimentReport) {
    let started = Instant::now();
    let again = harness::run_experiment(&smoke.config).unwrap().report;
    let same_node = again.history.len() == smoke.history.len()
        && again.history.iter().zip(&smoke.history).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut ude = load("ude_baseline");
    ude.name = "ude_determinism".into();
    ude.train.iterations = 300;
    let a = harness::run_experiment(&ude).unwrap().report;
    let b = harness::run_experiment(&ude).unwrap().report;
    let same_ude = a.history.len() == b.history.len()
        && a.bfgs_iterations > 0
        && a.history.iter().zip(&b.history).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut sweep = load("sweep_activations");
    sweep.train.iterations = 100;
    let grid = sweep.expand_sweep().unwrap();
    let s1 = harness::run_sweep(&grid, 2).unwrap();
    let s2 = harness::run_sweep(&grid, 1).unwrap();
    let same_sweep = s1.iter().zip(&s2).all(|(x, y)| {
        x.report.name == y.report.name
            && x.report.history.iter().map(|h| h.to_bits()).eq(y.report.history.iter().map(|h| h.to_bits()))
    });
    v.record(
        "determinism",
        same_node && same_ude && same_sweep,
        format!(
            "bit-identical loss histories: neural ODE 2000 iterations {same_node}, UDE Adam+BFGS 300 iterations {same_ude}, 3-arm sweep on 2 vs 1 workers {same_sweep}"
        ),
        started,
    );
}

fn main() {
    // `cargo test -- --list` and filters address the libtest harness only
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut v = Verdicts { lines: Vec::new() };
    gradient_correctness(&mut v);
    dynamics_correctness(&mut v);
    identification_identity(&mut v);
    let smoke = node_smoke(&mut v);
    determinism(&mut v, &smoke);
    activation_ordering(&mut v);
    let node = node_baseline(&mut v);
    let ude = ude_baseline(&mut v, &node);
    term_recovery(&mut v, &ude);
    breakdown_windows(&mut v, &node, &ude);
    noise_degradation(&mut v, &node);

    let passed = v.lines.iter().filter(|(ok, _)| *ok).count();
    println!("\nacceptance: {passed}/{} criteria passed", v.lines.len());
    for (ok, line) in &v.lines {
        if !ok {
            println!("  {line}");
        }
    }
    if passed < v.lines.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
