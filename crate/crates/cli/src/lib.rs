//! Command implementations for the `pe-design` binary.
//!
//! Every command resolves its parameters from flags, then an optional JSON
//! config file with the same keys, then defaults. The master seed falls back
//! to `PE_DESIGN_SEED`. Commands that write to an output directory also write
//! `provenance.json` with the resolved parameters, the seed and the tool
//! version.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pe_design::design::{kw_certificate, pe_loss, solve_design, Objective, ObjectiveKind, SolverOptions};
use pe_design::ingest::{fit_semisynthetic, load_csv, make_threshold_policy, subsample_actions, tau_for_high_count};
use pe_design::model::{fixture_by_name, Environment, TargetPolicy, FIXTURE_NAMES};
use pe_design::sim::{
    concentration_probe, empirical_regret, mse_experiment, resolve_environment, write_probe_csv, write_report_csv,
    SimConfig,
};

pub const SEED_ENV: &str = "PE_DESIGN_SEED";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Result of a command that did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Results were written but something is off (non-converged solve,
    /// failed simulation cells).
    Degraded,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Self::Success => 0,
            Self::Degraded => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pe-design", version, about = "Optimal data collection for policy evaluation in linear bandits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve a design problem and print the weights with their certificates.
    Solve(SolveArgs),
    /// Run a Monte-Carlo MSE/regret experiment from a JSON config.
    Simulate(SimulateArgs),
    /// Build a semi-synthetic environment and threshold policy from a CSV file.
    Ingest(IngestArgs),
    /// Measure the covariance error of the forced-exploration phase.
    Probe(ProbeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveArg {
    Pe,
    A,
    G,
    D,
}

impl ObjectiveArg {
    fn objective(self) -> Objective {
        match self {
            Self::Pe => Objective::pe(),
            Self::A => Objective::new(ObjectiveKind::AOptimal, true),
            Self::G => Objective::new(ObjectiveKind::GOptimal, true),
            Self::D => Objective::new(ObjectiveKind::DOptimal, true),
        }
    }
}

/// Environment source shared by `solve` and `probe`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSource {
    /// Bundled fixture name.
    #[arg(long, conflicts_with = "env")]
    pub fixture: Option<String>,
    /// Environment JSON file.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Target policy JSON file (defaults to the fixture policy, or uniform).
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

impl EnvSource {
    fn merge(self, file: EnvSource) -> Self {
        if self.fixture.is_some() || self.env.is_some() {
            Self { policy: self.policy.or(file.policy), ..self }
        } else {
            Self { fixture: file.fixture, env: file.env, policy: self.policy.or(file.policy) }
        }
    }

    fn resolve(&self) -> Result<(Environment, TargetPolicy)> {
        let (env, pi) = match (&self.fixture, &self.env) {
            (Some(name), _) => fixture_by_name(name).map_err(|e| anyhow!(e))?,
            (None, Some(path)) => {
                let env = Environment::load(path)
                    .with_context(|| format!("cannot read environment file {}", path.display()))?;
                let pi = TargetPolicy::uniform(env.num_actions());
                (env, pi)
            }
            (None, None) => bail!("pass --fixture <{}> or --env <file>", FIXTURE_NAMES.join("|")),
        };
        let pi = match &self.policy {
            Some(path) => {
                TargetPolicy::load(path).with_context(|| format!("cannot read policy file {}", path.display()))?
            }
            None => pi,
        };
        if pi.len() != env.num_actions() {
            bail!("policy has {} entries but the environment has {} actions", pi.len(), env.num_actions());
        }
        Ok((env, pi))
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: EnvSource,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Frank-Wolfe gap tolerance (relative for pe/a, absolute for d/g).
    /// Defaults to 1e-6; much tighter values can stall at rounding level.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Budget used to report the loss `L_n`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory for design.json and provenance.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with default values for these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SimulateArgs {
    /// Simulation config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Output directory (default: results).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct IngestArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Target column name.
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated feature columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Variance threshold for the low-probability group.
    #[arg(long, conflicts_with = "high_count")]
    pub tau: Option<f64>,
    /// Choose tau so that exactly this many actions are above it.
    #[arg(long)]
    pub high_count: Option<usize>,
    /// Total target mass on the high-variance actions (default 0.1).
    #[arg(long)]
    pub p_low: Option<f64>,
    /// Alternating-fit rounds (default 2).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Keep raw feature scales instead of unit max-norm columns.
    #[arg(long)]
    pub no_normalize: bool,
    /// Use a random subset of this many rows as actions.
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: EnvSource,
    /// Comma-separated exploration lengths.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<usize>>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for probe.csv and provenance.json (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

/// Flag, then config value, then `PE_DESIGN_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}='{v}' is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_provenance(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    started: Instant,
) -> Result<()> {
    write_json(
        &dir.join("provenance.json"),
        &json!({
            "tool": "pe-design",
            "version": VERSION,
            "command": command,
            "seed": seed,
            "config": config,
            "wall_time_secs": started.elapsed().as_secs_f64(),
        }),
    )
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn cmd_solve(args: SolveArgs) -> Result<Outcome> {
    let started = Instant::now();
    let file: SolveArgs = read_config(args.config.as_deref())?;
    let args = SolveArgs {
        source: args.source.merge(file.source),
        objective: args.objective.or(file.objective),
        epsilon: args.epsilon.or(file.epsilon),
        max_iter: args.max_iter.or(file.max_iter),
        n: args.n.or(file.n),
        out: args.out.or(file.out),
        config: args.config,
    };
    let (env, pi) = args.source.resolve()?;
    let objective_arg = args.objective.unwrap_or(ObjectiveArg::Pe);
    let objective = objective_arg.objective();
    let (a, d) = (env.num_actions(), env.dim());
    let options =
        SolverOptions { epsilon: args.epsilon.unwrap_or(1e-6), max_iter: args.max_iter.unwrap_or(1000 * a * d) };
    let variances: Vec<f64> = env.variances().iter().map(|v| v.max(1e-12)).collect();
    let sol = solve_design(objective, env.features(), &variances, Some(&pi), options)?;
    let kw = kw_certificate(&sol.weights, env.features(), &variances)?;
    let n = args.n.unwrap_or(1);
    let loss = pe_loss(&pi, &sol.weights, &variances, env.features(), n).ok();

    let output = json!({
        "objective": objective.kind.as_str(),
        "weights": sol.weights.probs(),
        "gap": sol.gap,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "value": sol.value,
        "pe_loss": loss,
        "n": n,
        "kw_certificate": kw,
    });
    println!("{}", serde_json::to_string_pretty(&output)?);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json(&dir.join("design.json"), &output)?;
        write_provenance(dir, "solve", None, serde_json::to_value(&args)?, started)?;
    }
    if !sol.converged {
        eprintln!("warning: solver stopped after {} iterations with gap {:e}", sol.iterations, sol.gap);
        return Ok(Outcome::Degraded);
    }
    Ok(Outcome::Success)
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<Outcome> {
    let started = Instant::now();
    let text =
        fs::read_to_string(&args.config).with_context(|| format!("cannot read config {}", args.config.display()))?;
    let mut cfg = SimConfig::from_json(&text).with_context(|| format!("invalid config {}", args.config.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let file_seed = raw.get("master_seed").map(|_| cfg.master_seed);
    cfg.master_seed = resolve_seed(args.seed, file_seed)?;
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    let (env, pi) = resolve_environment(&cfg.env_ref, cfg.policy_ref.as_deref())?;
    let report = mse_experiment(&cfg, &env, &pi, cfg.workers)?;
    let regret = match (cfg.regret, cfg.oracle_name()) {
        (true, Some(oracle)) => match empirical_regret(&report, &oracle, cfg.regret_estimator) {
            Ok(r) => Some(r),
            Err(e) => {
                eprintln!("warning: regret not computed: {e}");
                None
            }
        },
        _ => None,
    };

    let dir = args.out.unwrap_or_else(|| PathBuf::from("results"));
    create_dir(&dir)?;
    let mut csv_bytes = Vec::new();
    write_report_csv(&report, regret.as_ref(), &mut csv_bytes)?;
    fs::write(dir.join("report.csv"), &csv_bytes)?;
    let failures: Vec<_> = report.failures().map(|c| json!({"agent": c.agent, "n": c.n, "error": c.error})).collect();
    let cfg_json = serde_json::to_value(&cfg)?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "version": VERSION,
            "config": cfg_json,
            "master_seed": cfg.master_seed,
            "seed_scheme": "ChaCha8(master_seed) with stream id splitmix(agent index, budget index, replication)",
            "true_value": report.true_value,
            "cells": report.cells,
            "regret": regret,
            "failures": failures,
            "wall_time_secs": started.elapsed().as_secs_f64(),
        }),
    )?;
    write_provenance(&dir, "simulate", Some(cfg.master_seed), cfg_json, started)?;
    print!("{}", String::from_utf8_lossy(&csv_bytes));
    if !failures.is_empty() || (cfg.regret && regret.is_none()) {
        for f in &failures {
            eprintln!("warning: cell failed: {f}");
        }
        return Ok(Outcome::Degraded);
    }
    Ok(Outcome::Success)
}

pub fn cmd_ingest(args: IngestArgs) -> Result<Outcome> {
    let started = Instant::now();
    let file: IngestArgs = read_config(args.config.as_deref())?;
    let args = IngestArgs {
        csv: args.csv.or(file.csv),
        target: args.target.or(file.target),
        features: args.features.or(file.features),
        tau: args.tau.or(file.tau),
        high_count: args.high_count.or(file.high_count),
        p_low: args.p_low.or(file.p_low),
        iters: args.iters.or(file.iters),
        no_normalize: args.no_normalize || file.no_normalize,
        subsample: args.subsample.or(file.subsample),
        seed: args.seed.or(file.seed),
        out: args.out.or(file.out),
        config: args.config,
    };
    let csv = args.csv.as_ref().ok_or_else(|| anyhow!("--csv is required"))?;
    let target = args.target.as_deref().ok_or_else(|| anyhow!("--target is required"))?;
    let out = args.out.as_ref().ok_or_else(|| anyhow!("--out is required"))?;
    let seed = resolve_seed(args.seed, None)?;

    let mut table = load_csv(csv, args.features.as_deref(), target, !args.no_normalize)
        .with_context(|| format!("cannot load {}", csv.display()))?;
    if let Some(m) = args.subsample {
        table = subsample_actions(&table, m, seed)?;
    }
    let env = fit_semisynthetic(&table, args.iters.unwrap_or(2))?;
    let tau = match (args.tau, args.high_count) {
        (Some(t), _) => t,
        (None, Some(k)) => tau_for_high_count(&env, k)?,
        (None, None) => bail!("pass --tau or --high-count"),
    };
    let p_low = args.p_low.unwrap_or(0.1);
    let pi = make_threshold_policy(&env, tau, p_low)?;

    create_dir(out)?;
    env.save(out.join("environment.json"))?;
    pi.save(out.join("policy.json"))?;
    let variances = env.variances();
    let high = variances.iter().filter(|&&v| v > tau).count();
    let summary = json!({
        "d": env.dim(),
        "actions": env.num_actions(),
        "dropped_rows": table.dropped,
        "variance_min": variances.iter().copied().fold(f64::INFINITY, f64::min),
        "variance_max": variances.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "tau": tau,
        "p_low": p_low,
        "high_variance_actions": high,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    write_provenance(out, "ingest", Some(seed), serde_json::to_value(&args)?, started)?;
    Ok(Outcome::Success)
}

pub fn cmd_probe(args: ProbeArgs) -> Result<Outcome> {
    let started = Instant::now();
    let file: ProbeArgs = read_config(args.config.as_deref())?;
    let args = ProbeArgs {
        source: args.source.merge(file.source),
        gammas: args.gammas.or(file.gammas),
        replications: args.replications.or(file.replications),
        seed: args.seed.or(file.seed),
        out: args.out.or(file.out),
        config: args.config,
    };
    let (env, _) = args.source.resolve()?;
    let gammas = args.gammas.clone().unwrap_or_else(|| vec![200, 400, 800]);
    let seed = resolve_seed(args.seed, None)?;
    let rows = concentration_probe(&env, &gammas, args.replications.unwrap_or(200), seed)?;
    let mut bytes = Vec::new();
    write_probe_csv(&rows, &mut bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        fs::write(dir.join("probe.csv"), &bytes)?;
        write_provenance(dir, "probe", Some(seed), serde_json::to_value(&args)?, started)?;
    }
    Ok(Outcome::Success)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Probe(a) => cmd_probe(a),
    }
}
