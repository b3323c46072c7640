//! Least-squares estimators for `θ*` and `Σ*`, forced-exploration action
//! selection, and the plug-in value estimate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen_desc};
use crate::model::TargetPolicy;

/// Ridge used when the OLS normal matrix is rank-deficient.
pub const RIDGE_FALLBACK: f64 = 1e-6;

/// One observed `(action, reward)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub action: usize,
    pub reward: f64,
}

/// Observations in collection order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Observation>,
    dim: usize,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { rows: Vec::new(), dim }
    }

    pub fn with_capacity(dim: usize, capacity: usize) -> Self {
        Self { rows: Vec::with_capacity(capacity), dim }
    }

    pub fn push(&mut self, action: usize, reward: f64) {
        self.rows.push(Observation { action, reward });
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows `range` of the dataset as an owned dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset { rows: self.rows[range].to_vec(), dim: self.dim }
    }

    /// Design matrix whose row `t` is `x(I_t)`.
    pub fn design(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "dataset has dimension {} but features have {} columns",
                self.dim,
                features.ncols()
            )));
        }
        if let Some(bad) = self.rows.iter().find(|o| o.action >= features.nrows()) {
            return Err(Error::ActionOutOfRange { index: bad.action, count: features.nrows() });
        }
        Ok(DMatrix::from_fn(self.rows.len(), self.dim, |t, j| features[(self.rows[t].action, j)]))
    }

    /// Design matrix for a bare action sequence.
    pub fn design_for(actions: &[usize], features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if let Some(&bad) = actions.iter().find(|&&a| a >= features.nrows()) {
            return Err(Error::ActionOutOfRange { index: bad, count: features.nrows() });
        }
        Ok(DMatrix::from_fn(actions.len(), features.ncols(), |t, j| features[(actions[t], j)]))
    }

    pub fn rewards(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|o| o.reward))
    }

    /// Pull counts `T(a)`.
    pub fn counts(&self, num_actions: usize) -> Vec<usize> {
        let mut c = vec![0; num_actions];
        for o in &self.rows {
            c[o.action] += 1;
        }
        c
    }

    /// Writes `round,action,reward` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "action", "reward"])?;
        for (t, o) in self.rows.iter().enumerate() {
            w.write_record([t.to_string(), o.action.to_string(), o.reward.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(θ̂, Σ̂)` together with the number of exploration rounds `Γ` behind `Σ̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatePair {
    pub theta_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub gamma: usize,
}

fn check_rows(x: &DMatrix<f64>, len: usize, what: &str) -> Result<()> {
    if x.nrows() != len {
        return Err(Error::DimensionMismatch(format!("{} feature rows but {len} {what}", x.nrows())));
    }
    Ok(())
}

/// Solves `argmin_θ Σ_t w_t (r_t − x_tᵀθ)² + ridge‖θ‖²`.
pub(crate) fn weighted_ridge(
    x: &DMatrix<f64>,
    r: &DVector<f64>,
    weights: Option<&[f64]>,
    ridge: f64,
) -> Result<DVector<f64>> {
    let d = x.ncols();
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for t in 0..x.nrows() {
        let w = weights.map_or(1.0, |w| w[t]);
        for i in 0..d {
            let xi = w * x[(t, i)];
            rhs[i] += xi * r[t];
            for j in 0..d {
                m[(i, j)] += xi * x[(t, j)];
            }
        }
    }
    for i in 0..d {
        m[(i, i)] += ridge;
    }
    let what = if ridge > 0.0 { "ridge normal matrix" } else { "normal matrix (use the ridge fallback)" };
    linalg::solve_spd(&m, &rhs, what)
}

/// Weighted fit plus the influence coefficients `c_t` with
/// `zᵀθ̂ = Σ_t c_t r_t`, retrying with [`RIDGE_FALLBACK`] on a singular
/// normal matrix. The flag reports whether the fallback was used.
pub(crate) fn fit_with_influence(
    x: &DMatrix<f64>,
    r: &DVector<f64>,
    weights: Option<&[f64]>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>, bool)> {
    let (theta, ridge, used) = match weighted_ridge(x, r, weights, 0.0) {
        Ok(theta) => (theta, 0.0, false),
        Err(Error::Singular(_)) => (weighted_ridge(x, r, weights, RIDGE_FALLBACK)?, RIDGE_FALLBACK, true),
        Err(e) => return Err(e),
    };
    let d = x.ncols();
    let mut m = DMatrix::<f64>::zeros(d, d);
    for t in 0..x.nrows() {
        let w = weights.map_or(1.0, |w| w[t]);
        let xt = x.row(t);
        m += w * xt.transpose() * xt;
    }
    for i in 0..d {
        m[(i, i)] += ridge;
    }
    let u = linalg::solve_spd(&m, z, "normal matrix")?;
    let c = (0..x.nrows()).map(|t| weights.map_or(1.0, |w| w[t]) * x.row(t).transpose().dot(&u)).collect();
    Ok((theta, c, used))
}

/// Ordinary (optionally ridge-regularized) least squares.
///
/// With `ridge = 0` a rank-deficient design is an error; callers that need an
/// estimate anyway retry with [`RIDGE_FALLBACK`] (see [`ols_fit_with_fallback`]).
pub fn ols_fit(x: &DMatrix<f64>, rewards: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    check_rows(x, rewards.len(), "rewards")?;
    if ridge < 0.0 {
        return Err(Error::InvalidInput("ridge must be nonnegative".into()));
    }
    weighted_ridge(x, rewards, None, ridge)
}

/// OLS that falls back to ridge [`RIDGE_FALLBACK`] on a singular design.
/// The flag reports whether the fallback was used.
pub fn ols_fit_with_fallback(x: &DMatrix<f64>, rewards: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    match ols_fit(x, rewards, 0.0) {
        Ok(theta) => Ok((theta, false)),
        Err(Error::Singular(_)) => Ok((ols_fit(x, rewards, RIDGE_FALLBACK)?, true)),
        Err(e) => Err(e),
    }
}

/// Weighted least squares with weights `1/σ²(I_t)`.
pub fn wls_fit(x: &DMatrix<f64>, rewards: &DVector<f64>, variances: &[f64]) -> Result<DVector<f64>> {
    check_rows(x, rewards.len(), "rewards")?;
    check_rows(x, variances.len(), "variances")?;
    if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("WLS variances must be positive and finite".into()));
    }
    let weights: Vec<f64> = variances.iter().map(|v| 1.0 / v).collect();
    weighted_ridge(x, rewards, Some(&weights), 0.0)
}

/// Least-squares fit of a symmetric `S` to `⟨x_t x_tᵀ, S⟩ ≈ y_t`, solved on
/// the half-vectorization (minimum-norm when the outer products do not span
/// the symmetric matrices), then projected onto the PSD cone.
pub fn fit_sigma(x: &DMatrix<f64>, squared_residuals: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("fit_sigma needs at least one observation".into()));
    }
    check_rows(x, squared_residuals.len(), "squared residuals")?;
    let d = x.ncols();
    let p = linalg::sym_dim(d);
    let rows: Vec<f64> = (0..x.nrows()).flat_map(|t| linalg::halfvec_row(&linalg::row(x, t))).collect();
    let h = DMatrix::from_row_slice(x.nrows(), p, &rows);
    let svd = h.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let params = svd.solve(squared_residuals, tol).map_err(|e| Error::Singular(e.to_string()))?;
    Ok(linalg::project_psd(&linalg::unpack_halfvec(params.as_slice(), d)))
}

/// Forced-exploration set: one action per principal direction of the
/// uncentered second-moment matrix `XᵀX`, ordered by explained variance.
///
/// Each direction takes the action with the largest `|cos|` to it that is
/// linearly independent of the actions already chosen; ties go to the lowest
/// index.
pub fn pca_exploration_set(features: &DMatrix<f64>, d: usize) -> Result<Vec<usize>> {
    let (num_actions, cols) = features.shape();
    if cols != d {
        return Err(Error::DimensionMismatch(format!("features have {cols} columns, expected {d}")));
    }
    let nonzero: Vec<usize> = (0..num_actions).filter(|&a| features.row(a).norm() > 0.0).collect();
    if nonzero.len() < d {
        return Err(Error::InvalidInput(format!("need {d} nonzero actions for exploration, found {}", nonzero.len())));
    }
    let (_, dirs) = sym_eigen_desc(&(features.transpose() * features));
    // Orthonormal basis of the span of the chosen actions.
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
    let mut chosen = Vec::with_capacity(d);
    for k in 0..d {
        let dir = dirs.column(k);
        let mut best: Option<(usize, f64, DVector<f64>)> = None;
        for &a in &nonzero {
            if chosen.contains(&a) {
                continue;
            }
            let x = features.row(a).transpose();
            let norm = x.norm();
            let mut resid = x.clone();
            for b in &basis {
                let c = b.dot(&resid);
                resid -= b * c;
            }
            if resid.norm() <= 1e-9 * norm {
                continue;
            }
            let cos = (x.dot(&dir) / norm).abs();
            let better = match &best {
                None => true,
                Some((_, c, _)) => cos > *c + 1e-12,
            };
            if better {
                best = Some((a, cos, resid));
            }
        }
        let (a, _, resid) =
            best.ok_or_else(|| Error::InvalidInput("features do not span R^d; cannot build exploration set".into()))?;
        basis.push(&resid / resid.norm());
        chosen.push(a);
    }
    Ok(chosen)
}

/// `Y = Σ_a π(a) x(a)ᵀ θ̂`.
pub fn estimate_value(theta_hat: &DVector<f64>, pi: &TargetPolicy, features: &DMatrix<f64>) -> Result<f64> {
    if theta_hat.len() != features.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "theta has length {} but features have {} columns",
            theta_hat.len(),
            features.ncols()
        )));
    }
    Ok(pi.weighted_feature(features)?.dot(theta_hat))
}
