//! Monte-Carlo checks. Seeds are fixed, so each test is deterministic; the
//! tolerances leave several standard errors of room.

use pe_design::design::trace_sandwich;
use pe_design::model::{fixture_by_name, fixture_env_e};
use pe_design::{
    allocate, closed_form_vs_mc, concentration_probe, mse_experiment, pe_loss, solve_design, AgentSpec, DesignWeights,
    NoiseModel, Objective, ObjectiveKind, SimConfig, SolverOptions,
};

fn config(env_ref: &str, agents: &[&str], budgets: Vec<usize>, replications: usize, seed: u64) -> SimConfig {
    SimConfig {
        env_ref: env_ref.into(),
        policy_ref: None,
        budgets,
        replications,
        master_seed: seed,
        agents: agents.iter().map(|a| a.parse::<AgentSpec>().unwrap()).collect(),
        regret: false,
        regret_estimator: Default::default(),
        workers: None,
    }
}

#[test]
fn oracle_mse_matches_closed_form() {
    let (env, pi) = fixture_env_e();
    let n = 500;
    let report = mse_experiment(&config("env-E", &["oracle"], vec![n], 20_000, 31), &env, &pi, None).unwrap();
    let sol =
        solve_design(Objective::pe(), env.features(), env.variances(), Some(&pi), SolverOptions::tight(3, 2)).unwrap();
    let counts = allocate(sol.weights.probs(), n);
    let realized = DesignWeights::new(counts.iter().map(|&c| c as f64 / n as f64).collect()).unwrap();
    let closed = pe_loss(&pi, &realized, env.variances(), env.features(), n).unwrap();
    let mse = report.cell("oracle", n).unwrap().mse;
    assert!(((mse - closed) / closed).abs() < 0.05, "mse {mse} closed {closed}");
}

#[test]
fn sampling_on_policy_variance_follows_total_variance() {
    let (env, pi) = fixture_env_e();
    let n = 40;
    let report = mse_experiment(&config("env-E", &["on-policy:mc"], vec![n], 20_000, 32), &env, &pi, None).unwrap();
    let cell = report.cell("on-policy:mc", n).unwrap();
    let v = env.true_value(&pi).unwrap();
    let p = pi.probs();
    let between: f64 = p.iter().zip(env.means()).map(|(p, m)| p * (m - v).powi(2)).sum();
    let within: f64 = p.iter().zip(env.variances()).map(|(p, s)| p * s).sum();
    let expected = (between + within) / n as f64;
    assert!(((cell.mse - expected) / expected).abs() < 0.05, "mse {} expected {expected}", cell.mse);
    let mean: f64 = cell.values.iter().sum::<f64>() / cell.values.len() as f64;
    let se = (expected / cell.values.len() as f64).sqrt();
    assert!((mean - v).abs() < 4.0 * se, "mean {mean} v {v}");
}

#[test]
fn on_policy_regret_slope_on_env_e() {
    let (env, pi) = fixture_env_e();
    let mut cfg = config("env-E", &["oracle", "on-policy"], vec![500, 1000, 2000, 4000, 8000], 100, 33);
    cfg.regret = true;
    cfg.regret_estimator = pe_design::RegretEstimator::Conditional;
    let report = mse_experiment(&cfg, &env, &pi, None).unwrap();
    let regret = pe_design::empirical_regret(&report, "oracle", cfg.regret_estimator).unwrap();
    let slope = regret.slopes["on-policy"];
    assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
}

#[test]
fn oracle_dominates_baselines_on_unit_ball() {
    let (env, pi) = fixture_by_name("unitball-d2").unwrap();
    let n = 20_000;
    let agents = ["oracle", "a-optimal", "g-optimal", "on-policy"];
    let report = mse_experiment(&config("unitball-d2", &agents, vec![n], 100, 34), &env, &pi, None).unwrap();
    let oracle = report.cell("oracle", n).unwrap();
    for agent in &agents[1..] {
        let cell = report.cell(agent, n).unwrap();
        let slack = 2.0 * (oracle.stderr.powi(2) + cell.stderr.powi(2)).sqrt();
        assert!(oracle.mse <= cell.mse + slack, "{agent}: oracle {} vs {}", oracle.mse, cell.mse);
        assert!(oracle.cond_mse <= cell.cond_mse * (1.0 + 1e-9), "{agent}: conditional");
    }
}

#[test]
fn oracle_mse_respects_trace_bound() {
    let (env, pi) = fixture_by_name("unitball-d2").unwrap();
    let n = 2000;
    let report = mse_experiment(&config("unitball-d2", &["oracle"], vec![n], 2000, 35), &env, &pi, None).unwrap();
    let a_opt = solve_design(
        Objective::new(ObjectiveKind::AOptimal, true),
        env.features(),
        env.variances(),
        None,
        SolverOptions::tight(env.num_actions(), env.dim()),
    )
    .unwrap();
    let (_, upper) = trace_sandwich(&pi, &a_opt.weights, env.variances(), env.features(), n).unwrap();
    let mse = report.cell("oracle", n).unwrap().mse;
    assert!(mse <= upper * 1.1, "mse {mse} upper {upper}");
}

#[test]
fn doubling_replications_halves_stderr_squared() {
    let (env, pi) = fixture_env_e();
    let small = mse_experiment(&config("env-E", &["on-policy:mc"], vec![50], 2000, 36), &env, &pi, None).unwrap();
    let large = mse_experiment(&config("env-E", &["on-policy:mc"], vec![50], 4000, 37), &env, &pi, None).unwrap();
    let ratio = small.cells[0].stderr.powi(2) / large.cells[0].stderr.powi(2);
    assert!((1.4..=2.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn replications_are_uncorrelated() {
    let (env, pi) = fixture_env_e();
    let report =
        mse_experiment(&config("env-E", &["speed", "on-policy:mc"], vec![200], 2000, 38), &env, &pi, None).unwrap();
    for cell in &report.cells {
        let xs = &cell.values;
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = cov / var;
        assert!(rho.abs() < 0.1, "{}: rho {rho}", cell.agent);
    }
}

#[test]
fn closed_form_holds_for_gaussian_and_truncated_noise() {
    let (env, pi) = fixture_env_e();
    let b = DesignWeights::new(vec![0.5, 0.5, 0.0]).unwrap();
    let gaussian = env.with_noise(NoiseModel::gaussian()).unwrap();
    for (label, e) in [("truncated", &env), ("gaussian", &gaussian)] {
        let check = closed_form_vs_mc(e, &pi, &b, 400, 20_000, 39).unwrap();
        assert!(check.rel_err < 0.1, "{label}: {check:?}");
    }
    let check = closed_form_vs_mc(&env, &pi, &b, 400, 20_000, 40).unwrap();
    assert!(check.rel_err < 0.05, "{check:?}");
}

#[test]
fn covariance_error_shrinks_with_exploration() {
    let (env, _) = fixture_by_name("unitball-d2").unwrap();
    let rows = concentration_probe(&env, &[400, 1600], 200, 41).unwrap();
    assert!(rows[1].mean < rows[0].mean, "{rows:?}");
    assert!(rows.iter().all(|r| r.q90 >= 0.0 && r.mean >= 0.0));
}
