use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorenz-sciml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn simulate_default_writes_101_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = run(&["simulate", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(lines(&out.join("trajectory.csv")), 102);
    let text = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(text.starts_with("t,x,y,z\n"));
}

#[test]
fn simulate_empty_span_is_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[data]\ntrain_span = [0.0, 0.0]\nforecast_t1 = 0.0\n");
    let out = tmp.path().join("sim");
    let o = run(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(lines(&out.join("trajectory.csv")), 2);
}

#[test]
fn malformed_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[train]\nlearnig_rate = 0.1\n");
    let o = run(&["train-node", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "d.toml", "[data]\nsave_dt = -1.0\n");
    let o = run(&["simulate", "--config", &cfg, "--out", tmp.path().join("p").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("save_dt"), "{}", stderr(&o));
}

#[test]
fn truth_blowup_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[data]\nu0 = [1e300, 1e300, 1e300]\n");
    let o = run(&["simulate", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_with_partial_report() {
    // verbatim dz/dt = −β + z + 10·n3 grows like eᵗ at initialization and
    // overflows long before t = 750, while the reference decays to rest
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "kind = \"ude\"\n[lorenz]\nrho = 0.5\n[data]\ntrain_span = [0.0, 750.0]\nforecast_t1 = 750.0\nstep = 0.1\n[train]\niterations = 5\n",
    );
    let out = tmp.path().join("o");
    let o = run(&["train-ude", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("diverged"));
    assert!(out.join("loss.csv").exists());
}

const SMOKE_NODE: &str = "name = \"smoke\"\nkind = \"node\"\n[data]\ntrain_span = [0.0, 2.0]\nforecast_t1 = 3.0\n[train]\niterations = 10\n";
const SMOKE_UDE: &str = "name = \"smoke\"\nkind = \"ude\"\n[data]\ntrain_span = [0.0, 2.0]\nforecast_t1 = 3.0\n[train]\noptimizer = \"adam_bfgs\"\niterations = 10\n";

const REPORT_FILES: [&str; 9] = [
    "report.json",
    "config.toml",
    "loss.csv",
    "trajectory_truth.csv",
    "trajectory_train.csv",
    "trajectory_pred.csv",
    "trajectory_forecast.csv",
    "breakdown.csv",
    "checkpoint.json",
];

#[test]
fn train_smoke_writes_full_report_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let node_cfg = write_config(tmp.path(), "n.toml", SMOKE_NODE);
    let ude_cfg = write_config(tmp.path(), "u.toml", SMOKE_UDE);
    let node_out = tmp.path().join("node");
    let ude_out = tmp.path().join("ude");

    let o = run(&["train-node", "--config", &node_cfg, "--out", node_out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in REPORT_FILES {
        assert!(node_out.join(f).exists(), "missing {f}");
    }
    assert!(!node_out.join("residuals.csv").exists());
    assert_eq!(lines(&node_out.join("loss.csv")), 11);
    assert_eq!(lines(&node_out.join("trajectory_pred.csv")), 22);
    assert_eq!(lines(&node_out.join("breakdown.csv")), 32);

    let o = run(&["train-ude", "--config", &ude_cfg, "--out", ude_out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in REPORT_FILES.iter().chain(&["residuals.csv"]) {
        assert!(ude_out.join(f).exists(), "missing {f}");
    }
    let residuals = std::fs::read_to_string(ude_out.join("residuals.csv")).unwrap();
    assert!(residuals.starts_with("t,nn1,g1,nn2,g2,nn3,g3\n"));

    // the saved config re-runs to the same loss history
    let rerun = tmp.path().join("rerun");
    let saved = node_out.join("config.toml");
    let o = run(&["train-node", "--config", saved.to_str().unwrap(), "--out", rerun.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(rerun.join("loss.csv")).unwrap(),
        std::fs::read_to_string(node_out.join("loss.csv")).unwrap()
    );

    let cmp = tmp.path().join("cmp");
    let o = run(&[
        "compare",
        node_out.to_str().unwrap(),
        ude_out.to_str().unwrap(),
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.starts_with("model,final_loss,train_end,breakdown_time,beyond_training\n"));
    assert!(table.contains("neural_ode,") && table.contains("ude,"));
    assert!(cmp.join("comparison.json").exists());
}

#[test]
fn kind_mismatch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "u.toml", SMOKE_UDE);
    let o = run(&["train-node", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("kind"));
}

#[test]
fn output_directory_needs_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep"), "x").unwrap();
    let o = run(&["simulate", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(out.join("keep").exists());
    let o = run(&["simulate", "--out", out.to_str().unwrap(), "--overwrite"]);
    assert_eq!(code(&o), 0);
    assert!(!out.join("keep").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "n.toml", SMOKE_NODE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&run(&["train-node", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "7"])), 0);
    assert_eq!(code(&run(&["train-node", "--config", &cfg, "--out", b.to_str().unwrap()])), 0);
    let report = std::fs::read_to_string(a.join("report.json")).unwrap();
    assert!(report.contains("\"seed\": 7"));
    assert_ne!(
        std::fs::read_to_string(a.join("loss.csv")).unwrap(),
        std::fs::read_to_string(b.join("loss.csv")).unwrap()
    );
}

#[test]
fn sweep_single_arm_and_empty_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.toml",
        &format!("{SMOKE_NODE}[sweep]\nactivation = [\"tanh\"]\n"),
    );
    let out = tmp.path().join("s");
    let o = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("smoke_tanh/report.json").exists());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("smoke_tanh,tanh,"));

    let empty = write_config(tmp.path(), "e.toml", &format!("{SMOKE_NODE}[sweep]\n"));
    let o = run(&["sweep", "--config", &empty, "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
