//! Environments, noise models and target policies.
//!
//! An [`Environment`] holds the action features `x(a)`, the reward parameter
//! `θ*`, and the covariance parameter `Σ*` that induces the per-action noise
//! variance `σ²(a) = x(a)ᵀ Σ* x(a)`. Environments are immutable once built
//! and can be shared freely between simulation workers.

mod fixtures;

pub use fixtures::{
    fixture_by_name, fixture_env_e, fixture_tabular_two, fixture_unit_ball, fixture_unit_ball_with, fixture_zero_noise,
    random_environment, sigma_from_variances, UnitBallParams, FIXTURE_NAMES,
};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen_desc};

/// Tolerance on `Σ*` asymmetry and on policy normalization.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Multiple of the largest noise standard deviation used as the default bound.
pub const DEFAULT_BOUND_MULTIPLE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    TruncatedGaussian,
    Uniform,
}

/// Reward noise distribution. `bound` is the truncation half-width `B`;
/// it is ignored by the plain Gaussian family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub bound: f64,
}

impl NoiseModel {
    pub fn gaussian() -> Self {
        Self { family: NoiseFamily::Gaussian, bound: f64::INFINITY }
    }

    pub fn truncated_gaussian(bound: f64) -> Self {
        Self { family: NoiseFamily::TruncatedGaussian, bound }
    }

    pub fn uniform(bound: f64) -> Self {
        Self { family: NoiseFamily::Uniform, bound }
    }

    /// Truncated Gaussian with `B = 6 σ_max`.
    pub fn default_for(max_variance: f64) -> Self {
        Self::truncated_gaussian(DEFAULT_BOUND_MULTIPLE * max_variance.max(0.0).sqrt())
    }
}

/// Variance of a standard normal truncated to `[-c, c]`.
fn truncated_unit_variance(c: f64) -> f64 {
    if c > 38.0 {
        return 1.0;
    }
    let mass = erf(c / std::f64::consts::SQRT_2);
    let density = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - 2.0 * c * density / mass
}

/// Scale `s` of the parent Gaussian such that `N(0, s²)` truncated to
/// `[-bound, bound]` has variance exactly `variance`.
fn truncated_parent_scale(variance: f64, bound: f64) -> Result<f64> {
    if variance == 0.0 {
        return Ok(0.0);
    }
    if !(variance < bound * bound / 3.0) {
        return Err(Error::InvalidEnvironment(format!(
            "truncated-gaussian noise cannot reach variance {variance} within bound {bound}"
        )));
    }
    let target = |s: f64| s * s * truncated_unit_variance(bound / s) - variance;
    let mut lo = variance.sqrt();
    let mut hi = lo;
    while target(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if target(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Ground-truth heteroscedastic linear bandit.
#[derive(Clone, Debug)]
pub struct Environment {
    features: DMatrix<f64>,
    theta_star: DVector<f64>,
    sigma_star: DMatrix<f64>,
    noise: NoiseModel,
    variances: Vec<f64>,
    means: Vec<f64>,
    noise_scales: Vec<f64>,
    norm_bounds: (f64, f64),
    metadata: Option<serde_json::Value>,
}

impl Environment {
    /// Builds and validates an environment.
    ///
    /// Rejects zero-norm actions, an asymmetric or indefinite `Σ*`, and noise
    /// models that cannot produce the required variances within their bound.
    pub fn new(
        features: DMatrix<f64>,
        theta_star: DVector<f64>,
        sigma_star: DMatrix<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        let (num_actions, d) = features.shape();
        if num_actions == 0 || d == 0 {
            return Err(Error::InvalidEnvironment("empty feature matrix".into()));
        }
        if theta_star.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "theta_star has length {} but features have {d} columns",
                theta_star.len()
            )));
        }
        if sigma_star.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!("sigma_star is {:?}, expected {d}x{d}", sigma_star.shape())));
        }
        if features.iter().chain(theta_star.iter()).chain(sigma_star.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidEnvironment("non-finite entry".into()));
        }
        let scale = sigma_star.amax().max(1.0);
        if linalg::max_asymmetry(&sigma_star) > SYMMETRY_TOL * scale {
            return Err(Error::InvalidEnvironment("sigma_star is not symmetric".into()));
        }
        let sigma_star = linalg::symmetrize(&sigma_star);
        let (eigs, _) = sym_eigen_desc(&sigma_star);
        if eigs[d - 1] < -1e-12 * scale {
            return Err(Error::InvalidEnvironment(format!("sigma_star has negative eigenvalue {:e}", eigs[d - 1])));
        }

        let mut variances = Vec::with_capacity(num_actions);
        let mut means = Vec::with_capacity(num_actions);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for a in 0..num_actions {
            let x = linalg::row(&features, a);
            let norm_sq: f64 = x.iter().map(|v| v * v).sum();
            if norm_sq == 0.0 {
                return Err(Error::InvalidEnvironment(format!("action {a} has a zero feature vector")));
            }
            lo = lo.min(norm_sq);
            hi = hi.max(norm_sq);
            variances.push(linalg::quad_form(&x, &sigma_star).max(0.0));
            means.push(x.iter().zip(theta_star.iter()).map(|(p, q)| p * q).sum());
        }

        let noise_scales = variances
            .iter()
            .map(|&v| match noise.family {
                NoiseFamily::Gaussian => Ok(v.sqrt()),
                NoiseFamily::TruncatedGaussian => truncated_parent_scale(v, noise.bound),
                NoiseFamily::Uniform => {
                    let half = (3.0 * v).sqrt();
                    if half > noise.bound {
                        Err(Error::InvalidEnvironment(format!(
                            "uniform noise with variance {v} exceeds bound {}",
                            noise.bound
                        )))
                    } else {
                        Ok(half)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            features,
            theta_star,
            sigma_star,
            noise,
            variances,
            means,
            noise_scales,
            norm_bounds: (lo.sqrt(), hi.sqrt()),
            metadata: None,
        })
    }

    /// Builds an environment with the default truncated-Gaussian noise.
    pub fn with_default_noise(
        features: DMatrix<f64>,
        theta_star: DVector<f64>,
        sigma_star: DMatrix<f64>,
    ) -> Result<Self> {
        let probe = Self::new(features, theta_star, sigma_star, NoiseModel::gaussian())?;
        let max_var = probe.variances.iter().copied().fold(0.0, f64::max);
        probe.with_noise(NoiseModel::default_for(max_var))
    }

    /// Same environment under a different noise model.
    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        let mut env = Self::new(self.features.clone(), self.theta_star.clone(), self.sigma_star.clone(), noise)?;
        env.metadata = self.metadata.clone();
        Ok(env)
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = Some(metadata);
        self
    }

    pub fn num_actions(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature(&self, a: usize) -> Vec<f64> {
        linalg::row(&self.features, a)
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn sigma_star(&self) -> &DMatrix<f64> {
        &self.sigma_star
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn metadata(&self) -> Option<&serde_json::Value> {
        self.metadata.as_ref()
    }

    /// `(H_L, H_U)`: smallest and largest feature norms.
    pub fn norm_bounds(&self) -> (f64, f64) {
        self.norm_bounds
    }

    fn check_index(&self, a: usize) -> Result<()> {
        if a >= self.num_actions() {
            return Err(Error::ActionOutOfRange { index: a, count: self.num_actions() });
        }
        Ok(())
    }

    /// `σ²(a) = x(a)ᵀ Σ* x(a)`.
    pub fn variance_of(&self, a: usize) -> Result<f64> {
        self.check_index(a)?;
        Ok(self.variances[a])
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// `μ(a) = x(a)ᵀ θ*`.
    pub fn mean_of(&self, a: usize) -> Result<f64> {
        self.check_index(a)?;
        Ok(self.means[a])
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Draws a zero-mean noise term with variance `σ²(a)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, a: usize, rng: &mut R) -> Result<f64> {
        self.check_index(a)?;
        let scale = self.noise_scales[a];
        if scale == 0.0 {
            return Ok(0.0);
        }
        let eta = match self.noise.family {
            NoiseFamily::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            }
            NoiseFamily::TruncatedGaussian => loop {
                let z: f64 = StandardNormal.sample(rng);
                let eta = scale * z;
                if eta.abs() <= self.noise.bound {
                    break eta;
                }
            },
            NoiseFamily::Uniform => rng.random_range(-scale..=scale),
        };
        Ok(eta)
    }

    /// `R(a) = x(a)ᵀ θ* + η`.
    pub fn sample_reward<R: Rng + ?Sized>(&self, a: usize, rng: &mut R) -> Result<f64> {
        let eta = self.sample_noise(a, rng)?;
        Ok(self.means[a] + eta)
    }

    /// `v(π) = Σ_a π(a) x(a)ᵀ θ*`.
    pub fn true_value(&self, pi: &TargetPolicy) -> Result<f64> {
        pi.check_len(self.num_actions())?;
        Ok(pi.probs.iter().zip(&self.means).map(|(p, m)| p * m).sum())
    }

    /// `(σ²_min, σ²_max)` from the singular values of `Σ*` and the feature
    /// norm bounds; every `σ²(a)` lies between them.
    pub fn variance_bounds(&self) -> (f64, f64) {
        let sv = self.sigma_star.clone().svd(false, false).singular_values;
        let (h_lo, h_hi) = self.norm_bounds;
        (sv.min() * h_lo * h_lo, sv.max() * h_hi * h_hi)
    }

    pub fn to_file_repr(&self) -> EnvironmentFile {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| linalg::row(m, i)).collect();
        EnvironmentFile {
            features: rows(&self.features),
            theta_star: self.theta_star.iter().copied().collect(),
            sigma_star: rows(&self.sigma_star),
            noise: NoiseFile::from(self.noise),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file_repr())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EnvironmentFile = serde_json::from_str(text)?;
        file.into_environment()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// On-disk noise descriptor. JSON cannot carry an infinite bound, so the
/// Gaussian family stores `null`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseFile {
    pub family: NoiseFamily,
    #[serde(default)]
    pub bound: Option<f64>,
}

impl From<NoiseModel> for NoiseFile {
    fn from(n: NoiseModel) -> Self {
        Self { family: n.family, bound: n.bound.is_finite().then_some(n.bound) }
    }
}

/// JSON document for an environment: row-major nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub features: Vec<Vec<f64>>,
    pub theta_star: Vec<f64>,
    pub sigma_star: Vec<Vec<f64>>,
    pub noise: NoiseFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!("{what} rows have unequal lengths")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

impl EnvironmentFile {
    pub fn into_environment(self) -> Result<Environment> {
        let features = matrix_from_rows(&self.features, "features")?;
        let sigma = matrix_from_rows(&self.sigma_star, "sigma_star")?;
        let theta = DVector::from_vec(self.theta_star);
        let noise = match (self.noise.family, self.noise.bound) {
            (NoiseFamily::Gaussian, _) => NoiseModel::gaussian(),
            (family, Some(bound)) => NoiseModel { family, bound },
            (family, None) => return Err(Error::InvalidEnvironment(format!("{family:?} noise requires a bound"))),
        };
        let env = Environment::new(features, theta, sigma, noise)?;
        Ok(match self.metadata {
            Some(m) => env.with_metadata(m),
            None => env,
        })
    }
}

/// Result of the span check on a target policy's support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SpanReport {
    /// `{x(a) : π(a) > 0}` spans `R^d`.
    pub spans_features: bool,
    /// `{x(a)x(a)ᵀ : π(a) > 0}` spans the symmetric matrices.
    pub spans_outer_products: bool,
}

/// Target policy `π`, a probability vector over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPolicy {
    probs: Vec<f64>,
}

impl TargetPolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPolicy("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidPolicy("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SYMMETRY_TOL {
            return Err(Error::InvalidPolicy(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_actions: usize) -> Self {
        Self { probs: vec![1.0 / num_actions as f64; num_actions] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn check_len(&self, num_actions: usize) -> Result<()> {
        if self.probs.len() != num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries but there are {num_actions} actions",
                self.probs.len()
            )));
        }
        Ok(())
    }

    /// `z = Σ_a π(a) x(a)`, the policy-weighted feature.
    pub fn weighted_feature(&self, features: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_len(features.nrows())?;
        Ok(features.transpose() * DVector::from_column_slice(&self.probs))
    }

    pub fn check_span(&self, features: &DMatrix<f64>) -> Result<SpanReport> {
        self.check_len(features.nrows())?;
        let d = features.ncols();
        let support: Vec<usize> = (0..self.probs.len()).filter(|&a| self.probs[a] > 0.0).collect();
        let sub = DMatrix::from_fn(support.len(), d, |i, j| features[(support[i], j)]);
        let outer_rows: Vec<f64> =
            support.iter().flat_map(|&a| linalg::halfvec_row(&linalg::row(features, a))).collect();
        let outer = DMatrix::from_row_slice(support.len(), linalg::sym_dim(d), &outer_rows);
        Ok(SpanReport {
            spans_features: linalg::rank(&sub, 1e-10) == d,
            spans_outer_products: linalg::rank(&outer, 1e-10) == linalg::sym_dim(d),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw: TargetPolicy = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(raw.probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
