//! Data-collection strategies.
//!
//! Every agent spends exactly `n` pulls and returns the collected dataset, a
//! parameter estimate and the plug-in value estimate. Agnostic agents see the
//! environment only through [`EnvView`]; the oracle additionally sees the
//! noise covariance through [`OracleView`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{allocate, design_matrix, solve_design, DesignWeights, Objective, ObjectiveKind, SolverOptions};
use crate::error::{Error, Result};
use crate::estimators::{self, fit_sigma, pca_exploration_set, Dataset, EstimatePair};
use crate::linalg;
use crate::model::{Environment, TargetPolicy};

/// Default relative variance floor: estimated variances are clamped to at
/// least `floor · max_a σ̂²(a)`.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;
const ABSOLUTE_VARIANCE_FLOOR: f64 = 1e-12;

/// Sampling-only access to an environment: features and reward draws.
#[derive(Clone, Copy)]
pub struct EnvView<'a> {
    env: &'a Environment,
}

impl<'a> EnvView<'a> {
    pub fn new(env: &'a Environment) -> Self {
        Self { env }
    }

    pub fn features(&self) -> &'a DMatrix<f64> {
        self.env.features()
    }

    pub fn num_actions(&self) -> usize {
        self.env.num_actions()
    }

    pub fn dim(&self) -> usize {
        self.env.dim()
    }

    pub fn pull<R: Rng + ?Sized>(&self, action: usize, rng: &mut R) -> Result<f64> {
        self.env.sample_reward(action, rng)
    }
}

/// [`EnvView`] plus the true noise covariance (but not `θ*`).
#[derive(Clone, Copy)]
pub struct OracleView<'a> {
    view: EnvView<'a>,
}

impl<'a> OracleView<'a> {
    pub fn new(env: &'a Environment) -> Self {
        Self { view: EnvView::new(env) }
    }

    pub fn view(&self) -> EnvView<'a> {
        self.view
    }

    pub fn variances(&self) -> &'a [f64] {
        self.view.env.variances()
    }

    pub fn sigma_star(&self) -> &'a DMatrix<f64> {
        self.view.env.sigma_star()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Speed,
    Oracle,
    OnPolicy,
    AOptimal,
    GOptimal,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Speed => "speed",
            Self::Oracle => "oracle",
            Self::OnPolicy => "on-policy",
            Self::AOptimal => "a-optimal",
            Self::GOptimal => "g-optimal",
        }
    }
}

/// Estimator used by the on-policy agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnPolicyVariant {
    /// Deterministic counts `allocate(π, n)` and the OLS plug-in estimate.
    #[default]
    PlugIn,
    /// `a_t ~ π` i.i.d. and the sample mean of the rewards.
    Mc,
}

/// Agent configuration as written in simulation configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub kind: AgentKind,
    /// Display name; defaults to the kind (with `:mc` for the sampling
    /// on-policy variant).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Design-solver tolerance; defaults to `1/√n` (the oracle solves tightly).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// Relative floor on estimated variances (speed only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_floor: Option<f64>,
    /// On-policy estimator (on-policy only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<OnPolicyVariant>,
}

impl AgentSpec {
    pub fn new(kind: AgentKind) -> Self {
        Self { kind, label: None, epsilon: None, max_iter: None, sigma_floor: None, variant: None }
    }

    pub fn with_variant(mut self, variant: OnPolicyVariant) -> Self {
        self.variant = Some(variant);
        self
    }

    pub fn name(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        match (self.kind, self.variant) {
            (AgentKind::OnPolicy, Some(OnPolicyVariant::Mc)) => "on-policy:mc".to_string(),
            (kind, _) => kind.as_str().to_string(),
        }
    }

    /// Rejects options that do not apply to the kind or are out of range.
    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::Config(format!("{}: epsilon must be positive, got {eps}", self.name())));
            }
            if self.kind == AgentKind::OnPolicy {
                return Err(Error::Config("on-policy agents do not solve a design; drop 'epsilon'".into()));
            }
        }
        if self.max_iter == Some(0) {
            return Err(Error::Config(format!("{}: max_iter must be positive", self.name())));
        }
        if let Some(floor) = self.sigma_floor {
            if self.kind != AgentKind::Speed {
                return Err(Error::Config(format!("'sigma_floor' applies only to speed, not {}", self.kind.as_str())));
            }
            if !(0.0..1.0).contains(&floor) {
                return Err(Error::Config(format!("sigma_floor must be in [0, 1), got {floor}")));
            }
        }
        if self.variant.is_some() && self.kind != AgentKind::OnPolicy {
            return Err(Error::Config(format!("'variant' applies only to on-policy, not {}", self.kind.as_str())));
        }
        if matches!(&self.label, Some(l) if l.is_empty()) {
            return Err(Error::Config("agent label must not be empty".into()));
        }
        Ok(())
    }
}

impl FromStr for AgentSpec {
    type Err = Error;

    /// Parses `speed`, `oracle`, `on-policy`, `on-policy:mc`, `a-optimal`,
    /// `g-optimal`.
    fn from_str(s: &str) -> Result<Self> {
        let spec = match s {
            "speed" => Self::new(AgentKind::Speed),
            "oracle" => Self::new(AgentKind::Oracle),
            "on-policy" => Self::new(AgentKind::OnPolicy),
            "on-policy:mc" => Self::new(AgentKind::OnPolicy).with_variant(OnPolicyVariant::Mc),
            "a-optimal" => Self::new(AgentKind::AOptimal),
            "g-optimal" => Self::new(AgentKind::GOptimal),
            other => return Err(Error::Config(format!("unknown agent '{other}'"))),
        };
        Ok(spec)
    }
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Output of one agent run.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectionResult {
    pub dataset: Dataset,
    pub estimate: EstimatePair,
    pub value_estimate: f64,
    pub design_used: DesignWeights,
    /// Coefficients `c_t` with `value_estimate = Σ_t c_t r_t`. Given the
    /// actions, the estimate is linear in the rewards, so its conditional
    /// mean squared error is `Σ c_t² σ²(I_t) + (Σ c_t μ(I_t) − v(π))²`.
    pub value_weights: Vec<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl CollectionResult {
    /// Exact mean squared error of the value estimate conditional on the
    /// actions taken.
    pub fn conditional_mse(&self, env: &Environment, pi: &TargetPolicy) -> Result<f64> {
        let v = env.true_value(pi)?;
        let mut var = 0.0;
        let mut mean = 0.0;
        for (o, c) in self.dataset.rows().iter().zip(&self.value_weights) {
            var += c * c * env.variance_of(o.action)?;
            mean += c * env.mean_of(o.action)?;
        }
        Ok(var + (mean - v).powi(2))
    }
}

fn check_budget(n: usize, d: usize) -> Result<()> {
    let min = linalg::sym_dim(d) + d;
    if n < min {
        return Err(Error::BudgetTooSmall { n, min });
    }
    Ok(())
}

fn check_policy(pi: &TargetPolicy, num_actions: usize) -> Result<()> {
    if pi.len() != num_actions {
        return Err(Error::DimensionMismatch(format!("policy has {} entries for {num_actions} actions", pi.len())));
    }
    Ok(())
}

/// `⌈√n⌉`.
pub fn exploration_rounds(n: usize) -> usize {
    let mut g = (n as f64).sqrt() as usize;
    while g * g > n {
        g -= 1;
    }
    while g * g < n {
        g += 1;
    }
    g
}

/// Pulls `counts[a]` times each action, in action order.
fn pull_counts<R: Rng + ?Sized>(view: EnvView<'_>, counts: &[usize], data: &mut Dataset, rng: &mut R) -> Result<()> {
    for (a, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let r = view.pull(a, rng)?;
            data.push(a, r);
        }
    }
    Ok(())
}

/// Clamps variances to `max(floor · max, 1e-12)`.
pub fn clamp_variances(variances: &[f64], floor: f64) -> Vec<f64> {
    let max = variances.iter().copied().fold(0.0, f64::max);
    let lo = (floor * max).max(ABSOLUTE_VARIANCE_FLOOR);
    variances.iter().map(|v| v.max(lo)).collect()
}

fn quad_forms(features: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Vec<f64> {
    (0..features.nrows()).map(|a| linalg::quad_form(&linalg::row(features, a), sigma)).collect()
}

/// Forced exploration: `gamma` round-robin pulls over the PCA exploration set
/// followed by ridge-OLS, squared residuals and the covariance fit.
pub fn explore<R: Rng + ?Sized>(view: EnvView<'_>, gamma: usize, rng: &mut R) -> Result<(Dataset, EstimatePair)> {
    let d = view.dim();
    let set = pca_exploration_set(view.features(), d)?;
    let mut data = Dataset::with_capacity(d, gamma);
    for t in 0..gamma {
        let a = set[t % set.len()];
        let r = view.pull(a, rng)?;
        data.push(a, r);
    }
    let estimate = fit_exploration(&data, view.features())?;
    Ok((data, estimate))
}

/// `θ̂_Γ` and `Σ̂_Γ` from exploration data.
pub fn fit_exploration(data: &Dataset, features: &DMatrix<f64>) -> Result<EstimatePair> {
    let x = data.design(features)?;
    let r = data.rewards();
    let (theta, _) = estimators::ols_fit_with_fallback(&x, &r)?;
    let resid = (&r - &x * &theta).map(|e| e * e);
    let sigma = fit_sigma(&x, &resid)?;
    Ok(EstimatePair { theta_hat: theta, sigma_hat: sigma, gamma: data.len() })
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// SPEED: forced exploration for `⌈√n⌉` rounds, a PE design under the
/// estimated covariance, deterministic allocation of the remaining budget and
/// a weighted least-squares fit on the post-exploration data.
pub fn run_speed<R: Rng + ?Sized>(
    view: EnvView<'_>,
    pi: &TargetPolicy,
    n: usize,
    spec: &AgentSpec,
    rng: &mut R,
) -> Result<CollectionResult> {
    let (num_actions, d) = (view.num_actions(), view.dim());
    check_budget(n, d)?;
    check_policy(pi, num_actions)?;
    let features = view.features();
    let gamma = exploration_rounds(n);
    let (mut data, explored) = explore(view, gamma, rng)?;

    let floor = spec.sigma_floor.unwrap_or(DEFAULT_SIGMA_FLOOR);
    let variances = clamp_variances(&quad_forms(features, &explored.sigma_hat), floor);
    let mut options = SolverOptions::for_budget(n, num_actions, d);
    if let Some(eps) = spec.epsilon {
        options.epsilon = eps;
    }
    if let Some(it) = spec.max_iter {
        options.max_iter = it;
    }
    let solution = solve_design(Objective::pe(), features, &variances, Some(pi), options)?;
    let counts = allocate(solution.weights.probs(), n - gamma);
    pull_counts(view, &counts, &mut data, rng)?;

    let post = data.slice(gamma..n);
    let x = post.design(features)?;
    let weights: Vec<f64> = post.rows().iter().map(|o| 1.0 / variances[o.action]).collect();
    let z = pi.weighted_feature(features)?;
    let (theta, post_c, used_ridge) = estimators::fit_with_influence(&x, &post.rewards(), Some(&weights), &z)?;
    let mut value_weights = vec![0.0; gamma];
    value_weights.extend(post_c);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("gamma".into(), gamma as f64);
    diagnostics.insert("gap".into(), solution.gap);
    diagnostics.insert("iterations".into(), solution.iterations as f64);
    diagnostics.insert("converged".into(), flag(solution.converged));
    diagnostics.insert("used_ridge".into(), flag(used_ridge));
    if let Ok(bundle) = design_matrix(&solution.weights, features, &variances) {
        diagnostics.insert("design_cond".into(), bundle.cond);
    }

    Ok(CollectionResult {
        value_estimate: z.dot(&theta),
        dataset: data,
        estimate: EstimatePair { theta_hat: theta, sigma_hat: explored.sigma_hat, gamma },
        design_used: solution.weights,
        value_weights,
        diagnostics,
    })
}

/// Oracle: PE design under the true variances over all `n` rounds and WLS
/// with the true variances.
pub fn run_oracle<R: Rng + ?Sized>(
    oracle: OracleView<'_>,
    pi: &TargetPolicy,
    n: usize,
    spec: &AgentSpec,
    rng: &mut R,
) -> Result<CollectionResult> {
    let view = oracle.view();
    let (num_actions, d) = (view.num_actions(), view.dim());
    check_budget(n, d)?;
    check_policy(pi, num_actions)?;
    let features = view.features();
    let variances = clamp_variances(oracle.variances(), DEFAULT_SIGMA_FLOOR);
    let mut options = SolverOptions { epsilon: 1e-9, max_iter: 100 * num_actions * d };
    if let Some(eps) = spec.epsilon {
        options.epsilon = eps;
    }
    if let Some(it) = spec.max_iter {
        options.max_iter = it;
    }
    let solution = solve_design(Objective::pe(), features, &variances, Some(pi), options)?;
    let counts = allocate(solution.weights.probs(), n);
    let mut data = Dataset::with_capacity(d, n);
    pull_counts(view, &counts, &mut data, rng)?;

    let x = data.design(features)?;
    let weights: Vec<f64> = data.rows().iter().map(|o| 1.0 / variances[o.action]).collect();
    let z = pi.weighted_feature(features)?;
    let (theta, value_weights, used_ridge) = estimators::fit_with_influence(&x, &data.rewards(), Some(&weights), &z)?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("gap".into(), solution.gap);
    diagnostics.insert("iterations".into(), solution.iterations as f64);
    diagnostics.insert("converged".into(), flag(solution.converged));
    diagnostics.insert("used_ridge".into(), flag(used_ridge));
    Ok(CollectionResult {
        value_estimate: z.dot(&theta),
        dataset: data,
        estimate: EstimatePair { theta_hat: theta, sigma_hat: oracle.sigma_star().clone(), gamma: 0 },
        design_used: solution.weights,
        value_weights,
        diagnostics,
    })
}

/// On-policy collection. The plug-in variant needs the support of `π` to span
/// `R^d`; the sampling variant does not.
pub fn run_on_policy<R: Rng + ?Sized>(
    view: EnvView<'_>,
    pi: &TargetPolicy,
    n: usize,
    spec: &AgentSpec,
    rng: &mut R,
) -> Result<CollectionResult> {
    let (num_actions, d) = (view.num_actions(), view.dim());
    check_budget(n, d)?;
    check_policy(pi, num_actions)?;
    let features = view.features();
    let z = pi.weighted_feature(features)?;
    let mut data = Dataset::with_capacity(d, n);
    let mut diagnostics = BTreeMap::new();

    match spec.variant.unwrap_or_default() {
        OnPolicyVariant::PlugIn => {
            if !pi.check_span(features)?.spans_features {
                return Err(Error::InvalidPolicy(
                    "the support of the target policy does not span R^d; use the 'mc' on-policy variant".into(),
                ));
            }
            pull_counts(view, &allocate(pi.probs(), n), &mut data, rng)?;
            let x = data.design(features)?;
            let (theta, value_weights, used_ridge) = estimators::fit_with_influence(&x, &data.rewards(), None, &z)?;
            diagnostics.insert("used_ridge".into(), flag(used_ridge));
            Ok(CollectionResult {
                value_estimate: z.dot(&theta),
                dataset: data,
                estimate: EstimatePair { theta_hat: theta, sigma_hat: DMatrix::zeros(d, d), gamma: 0 },
                design_used: DesignWeights::from_policy(pi),
                value_weights,
                diagnostics,
            })
        }
        OnPolicyVariant::Mc => {
            let dist = WeightedIndex::new(pi.probs()).map_err(|e| Error::InvalidPolicy(e.to_string()))?;
            for _ in 0..n {
                let a = dist.sample(rng);
                let r = view.pull(a, rng)?;
                data.push(a, r);
            }
            let rewards = data.rewards();
            let mean = rewards.sum() / n as f64;
            let (theta, used_ridge) = estimators::ols_fit_with_fallback(&data.design(features)?, &rewards)?;
            diagnostics.insert("used_ridge".into(), flag(used_ridge));
            Ok(CollectionResult {
                value_estimate: mean,
                dataset: data,
                estimate: EstimatePair { theta_hat: theta, sigma_hat: DMatrix::zeros(d, d), gamma: 0 },
                design_used: DesignWeights::from_policy(pi),
                value_weights: vec![1.0 / n as f64; n],
                diagnostics,
            })
        }
    }
}

/// Homoscedastic A- or G-optimal design over the features, all `n` rounds
/// allocated up front, OLS plug-in estimate.
pub fn run_design_baseline<R: Rng + ?Sized>(
    kind: AgentKind,
    view: EnvView<'_>,
    pi: &TargetPolicy,
    n: usize,
    spec: &AgentSpec,
    rng: &mut R,
) -> Result<CollectionResult> {
    let objective = match kind {
        AgentKind::AOptimal => Objective::new(ObjectiveKind::AOptimal, false),
        AgentKind::GOptimal => Objective::new(ObjectiveKind::GOptimal, false),
        other => return Err(Error::Config(format!("{} is not a design baseline", other.as_str()))),
    };
    let (num_actions, d) = (view.num_actions(), view.dim());
    check_budget(n, d)?;
    check_policy(pi, num_actions)?;
    let features = view.features();
    let mut options = SolverOptions::for_budget(n, num_actions, d);
    if let Some(eps) = spec.epsilon {
        options.epsilon = eps;
    }
    if let Some(it) = spec.max_iter {
        options.max_iter = it;
    }
    let ones = vec![1.0; num_actions];
    let solution = solve_design(objective, features, &ones, None, options)?;
    let mut data = Dataset::with_capacity(d, n);
    pull_counts(view, &allocate(solution.weights.probs(), n), &mut data, rng)?;
    let x = data.design(features)?;
    let z = pi.weighted_feature(features)?;
    let (theta, value_weights, used_ridge) = estimators::fit_with_influence(&x, &data.rewards(), None, &z)?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("gap".into(), solution.gap);
    diagnostics.insert("iterations".into(), solution.iterations as f64);
    diagnostics.insert("converged".into(), flag(solution.converged));
    diagnostics.insert("used_ridge".into(), flag(used_ridge));
    Ok(CollectionResult {
        value_estimate: z.dot(&theta),
        dataset: data,
        estimate: EstimatePair { theta_hat: theta, sigma_hat: DMatrix::zeros(d, d), gamma: 0 },
        design_used: solution.weights,
        value_weights,
        diagnostics,
    })
}

/// Dispatches on `spec.kind`, handing each agent the view it is entitled to.
pub fn run_agent<R: Rng + ?Sized>(
    spec: &AgentSpec,
    env: &Environment,
    pi: &TargetPolicy,
    n: usize,
    rng: &mut R,
) -> Result<CollectionResult> {
    spec.validate()?;
    let view = EnvView::new(env);
    match spec.kind {
        AgentKind::Speed => run_speed(view, pi, n, spec, rng),
        AgentKind::Oracle => run_oracle(OracleView::new(env), pi, n, spec, rng),
        AgentKind::OnPolicy => run_on_policy(view, pi, n, spec, rng),
        kind @ (AgentKind::AOptimal | AgentKind::GOptimal) => run_design_baseline(kind, view, pi, n, spec, rng),
    }
}

/// `zᵀθ` for a parameter vector, used by callers holding only `θ̂`.
pub fn plug_in_value(theta: &DVector<f64>, pi: &TargetPolicy, features: &DMatrix<f64>) -> Result<f64> {
    estimators::estimate_value(theta, pi, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixture_env_e, fixture_tabular_two, fixture_zero_noise};
    use crate::rng::stream;

    fn all_specs() -> Vec<AgentSpec> {
        ["speed", "oracle", "on-policy", "on-policy:mc", "a-optimal", "g-optimal"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect()
    }

    #[test]
    fn gamma_is_ceiling_sqrt() {
        assert_eq!(exploration_rounds(400), 20);
        assert_eq!(exploration_rounds(401), 21);
        assert_eq!(exploration_rounds(2000), 45);
        assert_eq!(exploration_rounds(1), 1);
    }

    #[test]
    fn speed_bookkeeping_on_env_e() {
        let (env, pi) = fixture_env_e();
        let mut rng = stream(1, &[]);
        let res = run_speed(EnvView::new(&env), &pi, 400, &AgentSpec::new(AgentKind::Speed), &mut rng).unwrap();
        assert_eq!(res.dataset.len(), 400);
        assert_eq!(res.estimate.gamma, 20);
        assert_eq!(res.diagnostics["gamma"], 20.0);
        assert!(res.value_weights[..20].iter().all(|&c| c == 0.0));
        let y = estimators::estimate_value(&res.estimate.theta_hat, &pi, env.features()).unwrap();
        assert!((y - res.value_estimate).abs() < 1e-12);
        let via_weights: f64 = res.dataset.rows().iter().zip(&res.value_weights).map(|(o, c)| c * o.reward).sum();
        assert!((via_weights - res.value_estimate).abs() < 1e-9);
    }

    #[test]
    fn every_agent_spends_exactly_n() {
        let (env, pi) = fixture_tabular_two();
        for spec in all_specs() {
            for n in [5, 17, 100] {
                let mut rng = stream(2, &[n as u64]);
                let res = run_agent(&spec, &env, &pi, n, &mut rng).unwrap();
                assert_eq!(res.dataset.len(), n, "{spec}");
                assert_eq!(res.value_weights.len(), n);
            }
        }
    }

    #[test]
    fn budget_too_small_is_rejected() {
        let (env, pi) = fixture_env_e();
        let err = run_agent(&AgentSpec::new(AgentKind::Speed), &env, &pi, 4, &mut stream(0, &[])).unwrap_err();
        assert!(matches!(err, Error::BudgetTooSmall { n: 4, min: 5 }));
    }

    #[test]
    fn zero_noise_is_exact() {
        let (env, pi) = fixture_zero_noise().unwrap();
        let v = env.true_value(&pi).unwrap();
        // The sampling on-policy variant still carries action randomness.
        for spec in all_specs().into_iter().filter(|s| s.variant.is_none()) {
            let res = run_agent(&spec, &env, &pi, 200, &mut stream(3, &[])).unwrap();
            assert!((res.value_estimate - v).abs() < 1e-8, "{spec}: {}", res.value_estimate);
        }
    }

    #[test]
    fn agents_are_deterministic() {
        let (env, pi) = fixture_env_e();
        for spec in all_specs() {
            let a = run_agent(&spec, &env, &pi, 300, &mut stream(9, &[1])).unwrap();
            let b = run_agent(&spec, &env, &pi, 300, &mut stream(9, &[1])).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plug_in_on_policy_needs_spanning_support() {
        let (env, _) = fixture_env_e();
        let pi = TargetPolicy::new(vec![1.0, 0.0, 0.0]).unwrap();
        let err = run_agent(&AgentSpec::new(AgentKind::OnPolicy), &env, &pi, 100, &mut stream(0, &[])).unwrap_err();
        assert!(matches!(err, Error::InvalidPolicy(_)));
        let spec = AgentSpec::new(AgentKind::OnPolicy).with_variant(OnPolicyVariant::Mc);
        let res = run_agent(&spec, &env, &pi, 100, &mut stream(0, &[])).unwrap();
        assert!(res.dataset.rows().iter().all(|o| o.action == 0));
    }

    #[test]
    fn a_optimal_on_one_hot_is_uniform() {
        let (env, pi) = fixture_tabular_two();
        let res = run_agent(&"a-optimal".parse().unwrap(), &env, &pi, 100, &mut stream(0, &[])).unwrap();
        for p in res.design_used.probs() {
            assert!((p - 0.5).abs() < 1e-6);
        }
        assert_eq!(res.dataset.counts(2), vec![50, 50]);
    }

    #[test]
    fn oracle_matches_neyman_allocation() {
        let (env, pi) = fixture_tabular_two();
        let res = run_agent(&AgentSpec::new(AgentKind::Oracle), &env, &pi, 300, &mut stream(0, &[])).unwrap();
        assert_eq!(res.dataset.counts(2), vec![100, 200]);
    }

    #[test]
    fn spec_parsing_and_validation() {
        let spec: AgentSpec = serde_json::from_str(r#"{"kind":"speed","epsilon":0.01,"sigma_floor":1e-4}"#).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.name(), "speed");
        let bad: AgentSpec = serde_json::from_str(r#"{"kind":"oracle","variant":"mc"}"#).unwrap();
        assert!(bad.validate().is_err());
        let bad: AgentSpec = serde_json::from_str(r#"{"kind":"speed","epsilon":-1}"#).unwrap();
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<AgentSpec>(r#"{"kind":"speed","bogus":1}"#).is_err());
        assert!("ucb".parse::<AgentSpec>().is_err());
        assert_eq!("on-policy:mc".parse::<AgentSpec>().unwrap().name(), "on-policy:mc");
    }

    #[test]
    fn conditional_mse_for_deterministic_allocation() {
        // Tabular OLS: Var = Σ π(a)² σ²(a) / T(a).
        let (env, pi) = fixture_tabular_two();
        let res = run_agent(&AgentSpec::new(AgentKind::OnPolicy), &env, &pi, 100, &mut stream(0, &[])).unwrap();
        let want = 0.25 * 1.0 / 50.0 + 0.25 * 4.0 / 50.0;
        assert!((res.conditional_mse(&env, &pi).unwrap() - want).abs() < 1e-12);
    }
}
