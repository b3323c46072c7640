use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pe_design(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pe-design")).args(args).env_remove("PE_DESIGN_SEED").output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn weights(out: &Output) -> Vec<f64> {
    let json: Value = serde_json::from_str(&stdout(out)).unwrap();
    json["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).collect()
}

/// Minimizes the two-action tabular loss `π²σ²/b` over a grid of step 1e-3.
fn tabular_grid(pi: [f64; 2], var: [f64; 2]) -> f64 {
    (1..1000)
        .map(|i| i as f64 / 1000.0)
        .min_by(|a, b| {
            let f = |b: f64| pi[0].powi(2) * var[0] / b + pi[1].powi(2) * var[1] / (1.0 - b);
            f(*a).total_cmp(&f(*b))
        })
        .unwrap()
}

#[test]
fn solve_tabular_fixture() {
    let out = pe_design(&["solve", "--fixture", "tabular-2", "--objective", "pe"]);
    assert_eq!(out.status.code(), Some(0));
    let w = weights(&out);
    let grid = tabular_grid([0.5, 0.5], [1.0, 4.0]);
    assert!((w[0] - grid).abs() <= 1e-3, "{w:?} vs {grid}");
    assert!((w[0] - 1.0 / 3.0).abs() < 1e-4);
}

#[test]
fn solve_reports_certificate_and_writes_design() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("solve");
    let out = pe_design(&["solve", "--fixture", "env-E", "--objective", "d", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let json: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let kw = &json["kw_certificate"];
    assert!((kw["weighted_avg_norm"].as_f64().unwrap() - 2.0).abs() < 1e-8);
    assert!(kw["max_norm"].as_f64().unwrap() < 2.0 + 1e-3);
    assert!(out_dir.join("design.json").exists());
    assert!(out_dir.join("provenance.json").exists());
}

#[test]
fn unknown_objective_is_a_usage_error() {
    let out = pe_design(&["solve", "--fixture", "env-E", "--objective", "e-optimal"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("possible values"));
}

#[test]
fn unreadable_environment_file() {
    let out = pe_design(&["solve", "--env", "/nonexistent/env.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn iteration_cap_is_degraded_success() {
    let out = pe_design(&["solve", "--fixture", "unitball-d15", "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let json: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["converged"], Value::Bool(false));
}

fn write_config(dir: &Path, agents: &[&str], regret: bool) -> String {
    let cfg = serde_json::json!({
        "env_ref": "env-E",
        "budgets": [100, 200],
        "replications": 4,
        "agents": agents.iter().map(|a| serde_json::json!({"kind": a})).collect::<Vec<_>>(),
        "regret": regret,
    });
    let path = dir.join("sim.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_requires_oracle_for_regret() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &["speed", "on-policy"], true);
    let out = pe_design(&["simulate", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("oracle"));
}

#[test]
fn simulate_seed_sources() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &["oracle", "speed"], true);
    let run = |extra: &[&str], env_seed: Option<&str>, out: &str| {
        let out_dir = dir.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pe-design"));
        cmd.args(["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]).args(extra);
        match env_seed {
            Some(s) => cmd.env("PE_DESIGN_SEED", s),
            None => cmd.env_remove("PE_DESIGN_SEED"),
        };
        let output = cmd.output().unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
        let provenance: Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("provenance.json")).unwrap()).unwrap();
        assert!(out_dir.join("report.json").exists());
        (fs::read_to_string(out_dir.join("report.csv")).unwrap(), provenance["seed"].as_u64().unwrap())
    };
    let (from_env, seed_env) = run(&[], Some("77"), "env");
    let (from_flag, seed_flag) = run(&["--seed", "77"], Some("5"), "flag");
    let (default, seed_default) = run(&[], None, "default");
    assert_eq!((seed_env, seed_flag, seed_default), (77, 77, 0));
    assert_eq!(from_env, from_flag);
    assert_ne!(from_env, default);
    assert!(default.starts_with("agent,n,mse,stderr,regret,slope"));
}

#[test]
fn bundled_config_runs_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/unitball.cfg");
    let started = std::time::Instant::now();
    let out = pe_design(&["simulate", "--config", cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed().as_secs() < 60);
    let csv = stdout(&out);
    assert_eq!(csv.lines().count(), 1 + 5 * 4);
}

fn write_wine_csv(path: &Path) {
    let mut file = fs::File::create(path).unwrap();
    let names: Vec<String> = (0..11).map(|j| format!("f{j}")).collect();
    writeln!(file, "{},quality", names.join(",")).unwrap();
    // Deterministic pseudo-random rows with noise growing in the first column.
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..200 {
        let x: Vec<f64> = (0..11).map(|_| 0.1 + next()).collect();
        let noise = (next() - 0.5) * (0.1 + x[0]);
        let y: f64 = x.iter().enumerate().map(|(j, v)| v * (1.0 + j as f64 * 0.1)).sum::<f64>() + noise;
        let cells: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{},{y}", cells.join(",")).unwrap();
    }
}

#[test]
fn ingest_wine_shaped_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("wine.csv");
    write_wine_csv(&csv);
    let out_dir = dir.path().join("env");
    let out = pe_design(&[
        "ingest",
        "--csv",
        csv.to_str().unwrap(),
        "--target",
        "quality",
        "--high-count",
        "20",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let env = pe_design_core_env(&out_dir.join("environment.json"));
    assert_eq!((env.num_actions(), env.dim()), (200, 11));
    assert!(out_dir.join("policy.json").exists());
    assert!(out_dir.join("provenance.json").exists());

    // The written environment feeds back into the solver.
    let solve = pe_design(&[
        "solve",
        "--env",
        out_dir.join("environment.json").to_str().unwrap(),
        "--policy",
        out_dir.join("policy.json").to_str().unwrap(),
    ]);
    assert_eq!(solve.status.code(), Some(0), "{}", String::from_utf8_lossy(&solve.stderr));
    assert_eq!(weights(&solve).len(), 200);
}

fn pe_design_core_env(path: &Path) -> pe_design::Environment {
    pe_design::Environment::load(path).unwrap()
}

#[test]
fn ingest_threshold_above_all_variances() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("wine.csv");
    write_wine_csv(&csv);
    let out = pe_design(&[
        "ingest",
        "--csv",
        csv.to_str().unwrap(),
        "--target",
        "quality",
        "--tau",
        "1e9",
        "--out",
        dir.path().join("env").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn probe_is_deterministic_and_zero_without_noise() {
    let args = ["probe", "--fixture", "unitball-d2", "--gammas", "200,400,800", "--replications", "50"];
    let first = pe_design(&args);
    let second = pe_design(&args);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout);
    let means: Vec<f64> =
        stdout(&first).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");

    let zero = pe_design(&["probe", "--fixture", "zero-noise-d2", "--replications", "5"]);
    assert_eq!(zero.status.code(), Some(0));
    for line in stdout(&zero).lines().skip(1) {
        for cell in line.split(',').skip(1) {
            // Residuals of an exact fit are pure rounding.
            assert!(cell.parse::<f64>().unwrap().abs() < 1e-20, "{line}");
        }
    }
}
