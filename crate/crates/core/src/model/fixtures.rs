//! Canonical environments used by tests, the CLI and the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Environment, NoiseModel, TargetPolicy};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::stream;

pub const FIXTURE_NAMES: &[&str] = &["env-E", "tabular-2", "unitball-d2", "unitball-d15", "zero-noise-d2"];

/// Resolves a bundled fixture by name.
pub fn fixture_by_name(name: &str) -> Result<(Environment, TargetPolicy)> {
    match name {
        "env-E" | "env-e" => Ok(fixture_env_e()),
        "tabular-2" => Ok(fixture_tabular_two()),
        "unitball-d2" => fixture_unit_ball(2, 4, 0),
        "unitball-d15" => fixture_unit_ball(15, 15 * 15 + 20, 0),
        "zero-noise-d2" => fixture_zero_noise(),
        other => Err(Error::InvalidInput(format!(
            "unknown fixture '{other}' (expected one of {})",
            FIXTURE_NAMES.join(", ")
        ))),
    }
}

/// Symmetric `Σ` whose quadratic forms best match the requested variances,
/// projected onto the PSD cone.
pub fn sigma_from_variances(features: &DMatrix<f64>, variances: &[f64]) -> Result<DMatrix<f64>> {
    if features.nrows() != variances.len() {
        return Err(Error::DimensionMismatch("one variance per action required".into()));
    }
    let d = features.ncols();
    let rows: Vec<f64> = (0..features.nrows()).flat_map(|a| linalg::halfvec_row(&linalg::row(features, a))).collect();
    let h = DMatrix::from_row_slice(features.nrows(), linalg::sym_dim(d), &rows);
    let params = h
        .svd(true, true)
        .solve(&DVector::from_column_slice(variances), 1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(linalg::project_psd(&linalg::unpack_halfvec(params.as_slice(), d)))
}

/// Three actions in R²: `x₁ = (1,0)`, `x₂ = (0,1)`, `x₃ = (1/√2, 1/√2)` with
/// `θ* = (1,0)`, `π = (0.9, 0.1, 0)` and variances `(1, 1, 0.05)`.
pub fn fixture_env_e() -> (Environment, TargetPolicy) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let features = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, h, h]);
    let sigma = sigma_from_variances(&features, &[1.0, 1.0, 0.05]).expect("fixture is well posed");
    let env =
        Environment::with_default_noise(features, DVector::from_vec(vec![1.0, 0.0]), sigma).expect("fixture is valid");
    let pi = TargetPolicy::new(vec![0.9, 0.1, 0.0]).expect("fixture policy is valid");
    (env, pi)
}

/// One-hot features in R² with `σ² = (1, 4)` and the uniform target policy.
pub fn fixture_tabular_two() -> (Environment, TargetPolicy) {
    let env = Environment::with_default_noise(
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![1.0, 2.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
    )
    .expect("fixture is valid");
    (env, TargetPolicy::uniform(2))
}

/// Knobs of the unit-ball construction.
#[derive(Clone, Copy, Debug)]
pub struct UnitBallParams {
    /// Noise variance along the reward direction `θ*`.
    pub reward_variance: f64,
    /// Noise variance of each informative action orthogonal to `θ*`.
    pub informative_variance: f64,
    /// Target mass on the reward-maximizing action.
    pub reward_mass: f64,
    /// Total target mass on the informative actions.
    pub informative_mass: f64,
    /// Angle in degrees between `θ*` and the less-informative actions.
    pub less_informative_angle: f64,
}

impl Default for UnitBallParams {
    fn default() -> Self {
        Self {
            reward_variance: 0.05,
            informative_variance: 0.35,
            reward_mass: 0.1,
            informative_mass: 0.1,
            less_informative_angle: 60.0,
        }
    }
}

/// Unit-norm actions in `R^d`: action 0 points along `θ* = e₁`, actions
/// `1..d` are the informative axes `e₂..e_d` with high variance and low
/// target mass, and the remaining actions are less-informative directions
/// tilted away from `θ*`. See [`fixture_unit_ball_with`].
pub fn fixture_unit_ball(d: usize, num_actions: usize, seed: u64) -> Result<(Environment, TargetPolicy)> {
    fixture_unit_ball_with(d, num_actions, seed, UnitBallParams::default())
}

pub fn fixture_unit_ball_with(
    d: usize,
    num_actions: usize,
    seed: u64,
    params: UnitBallParams,
) -> Result<(Environment, TargetPolicy)> {
    if d < 2 {
        return Err(Error::InvalidInput("unit-ball fixture needs d >= 2".into()));
    }
    if num_actions < d {
        return Err(Error::InvalidInput(format!("need at least d = {d} actions, got {num_actions}")));
    }
    let extra = num_actions - d;
    let mut features = DMatrix::zeros(num_actions, d);
    for a in 0..d {
        features[(a, a)] = 1.0;
    }

    let mut rng = stream(seed, &[d as u64, num_actions as u64]);
    let pairs = extra / 2;
    for k in 0..extra {
        let row = d + k;
        if d == 2 {
            // Symmetric pairs about θ* keep XᵀX diagonal.
            let p = k / 2;
            let deg = if pairs <= 1 {
                params.less_informative_angle
            } else {
                params.less_informative_angle - 15.0 + 30.0 * p as f64 / (pairs - 1) as f64
            };
            let t = deg.to_radians();
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            features[(row, 0)] = t.cos();
            features[(row, 1)] = sign * t.sin();
        } else {
            let t = params.less_informative_angle.to_radians();
            let mut u: Vec<f64> = (1..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            features[(row, 0)] = t.cos();
            for j in 1..d {
                features[(row, j)] = t.sin() * u[j - 1];
            }
        }
    }

    let mut diag = vec![params.informative_variance; d];
    diag[0] = params.reward_variance;
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(diag));
    let mut theta = DVector::zeros(d);
    theta[0] = 1.0;

    let mut probs = vec![0.0; num_actions];
    for p in probs.iter_mut().take(d).skip(1) {
        *p = params.informative_mass / (d - 1) as f64;
    }
    if extra == 0 {
        probs[0] = 1.0 - params.informative_mass;
    } else {
        probs[0] = params.reward_mass;
        let rest = (1.0 - params.reward_mass - params.informative_mass) / extra as f64;
        for p in probs.iter_mut().skip(d) {
            *p = rest;
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);

    let env = Environment::with_default_noise(features, theta, sigma)?.with_metadata(serde_json::json!({
        "fixture": "unit-ball",
        "d": d,
        "actions": num_actions,
        "seed": seed,
    }));
    Ok((env, TargetPolicy::new(probs)?))
}

/// The two-dimensional unit-ball layout with `Σ* = 0`.
pub fn fixture_zero_noise() -> Result<(Environment, TargetPolicy)> {
    let (env, pi) = fixture_unit_ball(2, 4, 0)?;
    let env = Environment::with_default_noise(env.features().clone(), env.theta_star().clone(), DMatrix::zeros(2, 2))?;
    Ok((env, pi))
}

/// Random environment for property tests: features uniform on the unit
/// sphere, `Σ* = Q diag(λ) Qᵀ` with a random rotation `Q` and eigenvalues
/// uniform in `variance_range`, `θ*` standard normal, Gaussian noise.
pub fn random_environment<R: Rng + ?Sized>(
    d: usize,
    num_actions: usize,
    variance_range: (f64, f64),
    rng: &mut R,
) -> Environment {
    let gauss = |r: &mut R| -> f64 { StandardNormal.sample(r) };
    let mut features = DMatrix::zeros(num_actions, d);
    for a in 0..num_actions {
        let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for j in 0..d {
            features[(a, j)] = v[j] / norm;
        }
    }
    let g = DMatrix::from_fn(d, d, |_, _| gauss(rng));
    let q = g.qr().q();
    let lambdas = DVector::from_fn(d, |_, _| rng.random_range(variance_range.0..=variance_range.1));
    let sigma = linalg::symmetrize(&(&q * DMatrix::from_diagonal(&lambdas) * q.transpose()));
    let theta = DVector::from_fn(d, |_, _| gauss(rng));
    Environment::new(features, theta, sigma, NoiseModel::gaussian()).expect("random environment is valid")
}
