//! Monte-Carlo harness: MSE against budget, empirical regret against the
//! oracle, the exploration concentration probe and the closed-form check.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{explore, fit_exploration, run_agent, AgentKind, AgentSpec, EnvView};
use crate::design::{allocate, pe_loss, DesignWeights};
use crate::error::{Error, Result};
use crate::estimators::{pca_exploration_set, wls_fit, Dataset};
use crate::linalg::{self, ls_slope};
use crate::model::{fixture_by_name, Environment, TargetPolicy};
use crate::rng::stream;

/// Floor applied to regret before taking logs.
pub const REGRET_FLOOR: f64 = 1e-16;

/// How per-cell MSE is estimated for regret.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegretEstimator {
    /// Mean of `(Y_n − v(π))²` over replications.
    #[default]
    MonteCarlo,
    /// Mean over replications of the exact MSE conditional on the actions
    /// taken (see [`crate::agents::CollectionResult::value_weights`]).
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Fixture name or path to an environment JSON file.
    pub env_ref: String,
    /// Path to a policy JSON file; defaults to the fixture's policy, or the
    /// uniform policy for environment files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_ref: Option<String>,
    pub budgets: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub agents: Vec<AgentSpec>,
    /// Compute regret against the agent labelled `oracle`.
    #[serde(default)]
    pub regret: bool,
    #[serde(default)]
    pub regret_estimator: RegretEstimator,
    /// Worker threads; does not affect results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::Config("at least one budget is required".into()));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("budgets must be strictly increasing".into()));
        }
        if self.replications < 2 {
            return Err(Error::Config("replications must be at least 2".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("at least one agent is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for spec in &self.agents {
            spec.validate()?;
            if !names.insert(spec.name()) {
                return Err(Error::Config(format!("duplicate agent name '{}'", spec.name())));
            }
        }
        if self.regret && self.oracle_name().is_none() {
            return Err(Error::Config("regret requested but no oracle agent is configured".into()));
        }
        Ok(())
    }

    /// Name of the first oracle agent.
    pub fn oracle_name(&self) -> Option<String> {
        self.agents.iter().find(|s| s.kind == AgentKind::Oracle).map(AgentSpec::name)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Resolves `env_ref` / `policy_ref` to an environment and target policy.
pub fn resolve_environment(env_ref: &str, policy_ref: Option<&str>) -> Result<(Environment, TargetPolicy)> {
    let (env, pi) = match fixture_by_name(env_ref) {
        Ok(pair) => pair,
        Err(_) if std::path::Path::new(env_ref).exists() => {
            let env = Environment::load(env_ref)?;
            let pi = TargetPolicy::uniform(env.num_actions());
            (env, pi)
        }
        Err(e) => return Err(e),
    };
    let pi = match policy_ref {
        Some(path) => TargetPolicy::load(path)?,
        None => pi,
    };
    if pi.len() != env.num_actions() {
        return Err(Error::DimensionMismatch(format!(
            "policy has {} entries for {} actions",
            pi.len(),
            env.num_actions()
        )));
    }
    Ok((env, pi))
}

/// Aggregates for one `(agent, n)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseCell {
    pub agent: String,
    pub n: usize,
    pub mse: f64,
    /// Sample standard deviation of the squared errors over `√R`.
    pub stderr: f64,
    pub cond_mse: f64,
    pub cond_stderr: f64,
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Per-replication value estimates.
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl MseCell {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn mse_for(&self, estimator: RegretEstimator) -> (f64, f64) {
        match estimator {
            RegretEstimator::MonteCarlo => (self.mse, self.stderr),
            RegretEstimator::Conditional => (self.cond_mse, self.cond_stderr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub true_value: f64,
    pub replications: usize,
    pub cells: Vec<MseCell>,
}

impl MseReport {
    pub fn cell(&self, agent: &str, n: usize) -> Option<&MseCell> {
        self.cells.iter().find(|c| c.agent == agent && c.n == n)
    }

    pub fn failures(&self) -> impl Iterator<Item = &MseCell> {
        self.cells.iter().filter(|c| !c.is_ok())
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct Replication {
    value: f64,
    cond_mse: f64,
    diagnostics: BTreeMap<String, f64>,
}

fn run_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// Runs every `(agent, n, replication)` with stream `(seed, agent, n, r)`.
///
/// `workers = None` uses the global rayon pool. Results do not depend on the
/// worker count. A failing replication marks its cell with the error instead
/// of aborting the run.
pub fn mse_experiment(
    cfg: &SimConfig,
    env: &Environment,
    pi: &TargetPolicy,
    workers: Option<usize>,
) -> Result<MseReport> {
    cfg.validate()?;
    let v = env.true_value(pi)?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.agents.len())
        .flat_map(|i| (0..cfg.budgets.len()).flat_map(move |j| (0..cfg.replications).map(move |r| (i, j, r))))
        .collect();
    let outcomes: Vec<Result<Replication>> = run_pool(workers, || {
        jobs.par_iter()
            .map(|&(i, j, r)| {
                let mut rng = stream(cfg.master_seed, &[i as u64, j as u64, r as u64]);
                let res = run_agent(&cfg.agents[i], env, pi, cfg.budgets[j], &mut rng)?;
                Ok(Replication {
                    value: res.value_estimate,
                    cond_mse: res.conditional_mse(env, pi)?,
                    diagnostics: res.diagnostics,
                })
            })
            .collect()
    })?;

    let mut cells = Vec::with_capacity(cfg.agents.len() * cfg.budgets.len());
    let mut outcomes = outcomes.into_iter();
    for spec in &cfg.agents {
        for &n in &cfg.budgets {
            let reps: Vec<Result<Replication>> = outcomes.by_ref().take(cfg.replications).collect();
            let mut cell = MseCell {
                agent: spec.name(),
                n,
                mse: f64::NAN,
                stderr: f64::NAN,
                cond_mse: f64::NAN,
                cond_stderr: f64::NAN,
                diagnostics: BTreeMap::new(),
                error: None,
                values: Vec::new(),
            };
            if let Some(Err(e)) = reps.iter().find(|r| r.is_err()) {
                cell.error = Some(e.to_string());
                cells.push(cell);
                continue;
            }
            let reps: Vec<Replication> = reps.into_iter().map(|r| r.expect("checked above")).collect();
            let sq: Vec<f64> = reps.iter().map(|r| (r.value - v).powi(2)).collect();
            let cond: Vec<f64> = reps.iter().map(|r| r.cond_mse).collect();
            (cell.mse, cell.stderr) = mean_and_stderr(&sq);
            (cell.cond_mse, cell.cond_stderr) = mean_and_stderr(&cond);
            for rep in &reps {
                for (k, x) in &rep.diagnostics {
                    *cell.diagnostics.entry(k.clone()).or_insert(0.0) += x / reps.len() as f64;
                }
            }
            cell.values = reps.iter().map(|r| r.value).collect();
            cells.push(cell);
        }
    }
    Ok(MseReport { true_value: v, replications: cfg.replications, cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub agent: String,
    pub n: usize,
    pub regret: f64,
    /// Standard error of the regret treating the two cells as independent.
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub oracle: String,
    pub estimator: RegretEstimator,
    pub rows: Vec<RegretRow>,
    /// Least-squares slope of `ln max(regret, 1e-16)` on `ln n` per agent.
    pub slopes: BTreeMap<String, f64>,
}

impl RegretReport {
    pub fn row(&self, agent: &str, n: usize) -> Option<&RegretRow> {
        self.rows.iter().find(|r| r.agent == agent && r.n == n)
    }
}

/// Regret of every agent relative to `oracle` and the log-log slope per agent.
pub fn empirical_regret(report: &MseReport, oracle: &str, estimator: RegretEstimator) -> Result<RegretReport> {
    let mut rows = Vec::new();
    let mut agents: Vec<String> = Vec::new();
    for cell in &report.cells {
        if !agents.contains(&cell.agent) {
            agents.push(cell.agent.clone());
        }
    }
    if !agents.iter().any(|a| a == oracle) {
        return Err(Error::Config(format!("no oracle cells named '{oracle}'")));
    }
    let mut slopes = BTreeMap::new();
    for agent in &agents {
        let mut logs = (Vec::new(), Vec::new());
        for cell in report.cells.iter().filter(|c| &c.agent == agent) {
            let base = report
                .cell(oracle, cell.n)
                .ok_or_else(|| Error::Config(format!("oracle cell missing at n = {}", cell.n)))?;
            if let Some(e) = &base.error {
                return Err(Error::Config(format!("oracle failed at n = {}: {e}", cell.n)));
            }
            if !cell.is_ok() {
                continue;
            }
            let (m, s) = cell.mse_for(estimator);
            let (mo, so) = base.mse_for(estimator);
            let (regret, stderr) = if agent == oracle { (0.0, 0.0) } else { (m - mo, s.hypot(so)) };
            logs.0.push((cell.n as f64).ln());
            logs.1.push(regret.max(REGRET_FLOOR).ln());
            rows.push(RegretRow { agent: agent.clone(), n: cell.n, regret, stderr });
        }
        let slope = if logs.0.len() >= 2 { ls_slope(&logs.0, &logs.1) } else { f64::NAN };
        slopes.insert(agent.clone(), slope);
    }
    Ok(RegretReport { oracle: oracle.to_string(), estimator, rows, slopes })
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:e}")
    }
}

/// CSV with columns `agent,n,mse,stderr,regret,slope,cond_mse,cond_stderr`.
/// Regret and slope are empty without a regret report; all numbers are empty
/// for failed cells.
pub fn write_report_csv<W: Write>(report: &MseReport, regret: Option<&RegretReport>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["agent", "n", "mse", "stderr", "regret", "slope", "cond_mse", "cond_stderr"])?;
    for cell in &report.cells {
        let (r, s) = match regret {
            Some(reg) => (
                reg.row(&cell.agent, cell.n).map_or(f64::NAN, |r| r.regret),
                reg.slopes.get(&cell.agent).copied().unwrap_or(f64::NAN),
            ),
            None => (f64::NAN, f64::NAN),
        };
        w.write_record([
            cell.agent.clone(),
            cell.n.to_string(),
            fmt_num(cell.mse),
            fmt_num(cell.stderr),
            fmt_num(r),
            fmt_num(s),
            fmt_num(cell.cond_mse),
            fmt_num(cell.cond_stderr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the concentration probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub gamma: usize,
    pub mean: f64,
    pub q90: f64,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Error `max_a |x(a)ᵀ(Σ̂_Γ − Σ*)x(a)|` of the exploration-phase covariance
/// estimate for each `Γ`, summarized over `R` replications.
///
/// Replication `r` draws one exploration sequence of length `max Γ` from
/// stream `(seed, r)` and evaluates every `Γ` on its prefix, so the rows share
/// random numbers.
pub fn concentration_probe(
    env: &Environment,
    gammas: &[usize],
    replications: usize,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let d = env.dim();
    if gammas.is_empty() || replications == 0 {
        return Err(Error::InvalidInput("need at least one Γ and one replication".into()));
    }
    if let Some(&g) = gammas.iter().find(|&&g| g < d) {
        return Err(Error::InvalidInput(format!("Γ = {g} is below d = {d}")));
    }
    pca_exploration_set(env.features(), d)?;
    let max_gamma = *gammas.iter().max().expect("nonempty");
    let features = env.features();
    let errors: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut rng = stream(seed, &[r as u64]);
            let (data, _) = explore(EnvView::new(env), max_gamma, &mut rng)?;
            gammas
                .iter()
                .map(|&g| {
                    let est = fit_exploration(&data.slice(0..g), features)?;
                    let diff = &est.sigma_hat - env.sigma_star();
                    Ok((0..env.num_actions())
                        .map(|a| linalg::quad_form(&linalg::row(features, a), &diff).abs())
                        .fold(0.0, f64::max))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(gammas
        .iter()
        .enumerate()
        .map(|(k, &gamma)| {
            let col: Vec<f64> = errors.iter().map(|e| e[k]).collect();
            ProbeRow { gamma, mean: col.iter().sum::<f64>() / col.len() as f64, q90: quantile(&col, 0.9) }
        })
        .collect())
}

pub fn write_probe_csv<W: Write>(rows: &[ProbeRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "mean", "q90"])?;
    for row in rows {
        w.write_record([row.gamma.to_string(), format!("{:e}", row.mean), format!("{:e}", row.q90)])?;
    }
    w.flush()?;
    Ok(())
}

/// Closed-form loss against the Monte-Carlo MSE of the true-variance WLS
/// value estimate under `allocate(b, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCheck {
    pub closed: f64,
    pub mc: f64,
    pub rel_err: f64,
}

pub fn closed_form_vs_mc(
    env: &Environment,
    pi: &TargetPolicy,
    b: &DesignWeights,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<ClosedFormCheck> {
    let closed = pe_loss(pi, b, env.variances(), env.features(), n)?;
    let counts = allocate(b.probs(), n);
    let mut actions = Vec::with_capacity(n);
    for (a, &c) in counts.iter().enumerate() {
        actions.extend(std::iter::repeat_n(a, c));
    }
    let features = env.features();
    let x = Dataset::design_for(&actions, features)?;
    let weights: Vec<f64> = actions.iter().map(|&a| env.variances()[a]).collect();
    let v = env.true_value(pi)?;
    let z = pi.weighted_feature(features)?;
    let sq: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut rng = stream(seed, &[r as u64]);
            let rewards = nalgebra::DVector::from_iterator(
                n,
                actions.iter().map(|&a| env.sample_reward(a, &mut rng)).collect::<Result<Vec<_>>>()?,
            );
            let theta = wls_fit(&x, &rewards, &weights)?;
            Ok((z.dot(&theta) - v).powi(2))
        })
        .collect::<Result<_>>()?;
    let mc = sq.iter().sum::<f64>() / replications as f64;
    Ok(ClosedFormCheck { closed, mc, rel_err: (closed - mc).abs() / closed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixture_env_e, fixture_tabular_two, fixture_zero_noise};

    fn cfg(env: &str, agents: &[&str], budgets: Vec<usize>, r: usize) -> SimConfig {
        SimConfig {
            env_ref: env.into(),
            policy_ref: None,
            budgets,
            replications: r,
            master_seed: 11,
            agents: agents.iter().map(|a| a.parse().unwrap()).collect(),
            regret: false,
            regret_estimator: RegretEstimator::MonteCarlo,
            workers: None,
        }
    }

    #[test]
    fn zero_noise_mse_is_zero() {
        let (env, pi) = fixture_zero_noise().unwrap();
        let c = cfg("zero-noise-d2", &["speed", "oracle", "on-policy", "a-optimal", "g-optimal"], vec![50, 100], 4);
        let report = mse_experiment(&c, &env, &pi, Some(2)).unwrap();
        for cell in &report.cells {
            assert!(cell.mse < 1e-16, "{}: {}", cell.agent, cell.mse);
            assert!(cell.cond_mse < 1e-16);
        }
    }

    #[test]
    fn results_do_not_depend_on_workers() {
        let (env, pi) = fixture_env_e();
        let c = cfg("env-E", &["speed", "oracle"], vec![100, 200], 8);
        let a = mse_experiment(&c, &env, &pi, Some(1)).unwrap();
        let b = mse_experiment(&c, &env, &pi, Some(3)).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_report_csv(&a, None, &mut buf_a).unwrap();
        write_report_csv(&b, None, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn oracle_regret_is_zero_and_missing_oracle_errors() {
        let (env, pi) = fixture_env_e();
        let c = cfg("env-E", &["oracle", "on-policy"], vec![100, 200, 400], 5);
        let report = mse_experiment(&c, &env, &pi, None).unwrap();
        let reg = empirical_regret(&report, "oracle", RegretEstimator::Conditional).unwrap();
        for n in [100, 200, 400] {
            assert_eq!(reg.row("oracle", n).unwrap().regret, 0.0);
        }
        assert!(empirical_regret(&report, "nobody", RegretEstimator::MonteCarlo).is_err());

        let mut bad = cfg("env-E", &["speed"], vec![100], 5);
        bad.regret = true;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        let (env, pi) = fixture_env_e();
        // n = 4 is below the exploration minimum for d = 2.
        let c = cfg("env-E", &["oracle"], vec![4, 100], 3);
        let report = mse_experiment(&c, &env, &pi, None).unwrap();
        assert!(report.cell("oracle", 4).unwrap().error.is_some());
        assert!(report.cell("oracle", 100).unwrap().is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg("env-E", &["speed"], vec![200, 100], 10);
        assert!(c.validate().is_err());
        c.budgets = vec![100, 200];
        c.replications = 1;
        assert!(c.validate().is_err());
        let text = r#"{"env_ref":"env-E","budgets":[100],"replications":3,"agents":[{"kind":"oracle"}],"regret":true}"#;
        SimConfig::from_json(text).unwrap().validate().unwrap();
    }

    #[test]
    fn zero_noise_probe_is_zero() {
        let (env, _) = fixture_zero_noise().unwrap();
        let rows = concentration_probe(&env, &[4, 8], 5, 0).unwrap();
        for row in rows {
            assert!(row.mean.abs() < 1e-12 && row.q90.abs() < 1e-12);
        }
        assert!(concentration_probe(&env, &[1], 5, 0).is_err());
    }

    #[test]
    fn probe_quantile_dominates_median() {
        let (env, _) = fixture_tabular_two();
        let rows = concentration_probe(&env, &[20, 80], 50, 3).unwrap();
        for row in &rows {
            assert!(row.mean >= 0.0 && row.q90 >= 0.0);
        }
        assert!(rows[1].mean < rows[0].mean);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.9), 9.0);
    }

    #[test]
    fn closed_form_scalar_case() {
        let env = Environment::new(
            nalgebra::DMatrix::from_element(1, 1, 1.0),
            nalgebra::DVector::from_element(1, 0.5),
            nalgebra::DMatrix::from_element(1, 1, 2.0),
            crate::model::NoiseModel::gaussian(),
        )
        .unwrap();
        let pi = TargetPolicy::new(vec![1.0]).unwrap();
        let check = closed_form_vs_mc(&env, &pi, &DesignWeights::uniform(1), 40, 20_000, 4).unwrap();
        assert!((check.closed - 0.05).abs() < 1e-15);
        assert!(check.rel_err < 0.05, "{check:?}");
    }
}
