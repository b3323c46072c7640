//! Policy-evaluation optimal design.
//!
//! The loss of a behavior proportion `b` for evaluating a target policy `π`
//! is `L_n(b) = (1/n) zᵀ A_b⁻¹ z` where `z = Σ_a π(a) x(a)` and
//! `A_b = Σ_a b(a) x̃(a) x̃(a)ᵀ` with `x̃(a) = x(a)/σ(a)`. It is convex in
//! `b`, and [`solve_design`] minimizes it (or the classical A-/D-/G-optimal
//! criteria) over the simplex with an away-step Frank-Wolfe method whose
//! duality gap certifies the result.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, spd_inverse, sym_eigen_desc};
use crate::model::TargetPolicy;

/// Weights below this are treated as outside the support.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;
const SIMPLEX_TOL: f64 = 1e-10;

/// Behavior proportion `b` on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignWeights {
    probs: Vec<f64>,
}

impl DesignWeights {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty design".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("design weights must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("design weights sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_actions: usize) -> Self {
        Self { probs: vec![1.0 / num_actions as f64; num_actions] }
    }

    pub fn from_policy(pi: &TargetPolicy) -> Self {
        Self { probs: pi.probs().to_vec() }
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

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > SUPPORT_THRESHOLD).count()
    }
}

/// `A_{b,Σ}`, its inverse and its condition number.
#[derive(Clone, Debug)]
pub struct DesignMatrixBundle {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub cond: f64,
}

fn check_inputs(num: usize, features: &DMatrix<f64>, variances: &[f64]) -> Result<()> {
    if features.nrows() != num || variances.len() != num {
        return Err(Error::DimensionMismatch(format!(
            "{num} weights, {} feature rows, {} variances",
            features.nrows(),
            variances.len()
        )));
    }
    if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("variances must be positive and finite".into()));
    }
    Ok(())
}

/// Rows `x̃(a) = x(a)/σ(a)`.
pub fn scaled_features(features: &DMatrix<f64>, variances: &[f64]) -> Result<DMatrix<f64>> {
    check_inputs(features.nrows(), features, variances)?;
    let mut out = features.clone();
    for (a, v) in variances.iter().enumerate() {
        let s = v.sqrt();
        out.row_mut(a).iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}

fn gram(weights: &[f64], xt: &DMatrix<f64>) -> DMatrix<f64> {
    let d = xt.ncols();
    let mut m = DMatrix::zeros(d, d);
    for (a, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for i in 0..d {
            let xi = w * xt[(a, i)];
            for j in 0..d {
                m[(i, j)] += xi * xt[(a, j)];
            }
        }
    }
    m
}

/// `A = Σ_a b(a) x̃(a) x̃(a)ᵀ`; errors when the support of `b` does not span `R^d`.
pub fn design_matrix(b: &DesignWeights, features: &DMatrix<f64>, variances: &[f64]) -> Result<DesignMatrixBundle> {
    let xt = scaled_features(features, variances)?;
    check_inputs(b.len(), features, variances)?;
    let matrix = gram(b.probs(), &xt);
    let (inverse, cond) = spd_inverse(&matrix, "design matrix")?;
    Ok(DesignMatrixBundle { matrix, inverse, cond })
}

/// `L_n(π, b, Σ) = (1/n) zᵀ A⁻¹ z`.
pub fn pe_loss(
    pi: &TargetPolicy,
    b: &DesignWeights,
    variances: &[f64],
    features: &DMatrix<f64>,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("budget must be positive".into()));
    }
    let bundle = design_matrix(b, features, variances)?;
    let z = pi.weighted_feature(features)?;
    Ok(z.dot(&(&bundle.inverse * &z)) / n as f64)
}

/// Gradient of `n · L_n` in `b`: entry `a` is `−(zᵀ A⁻¹ x̃(a))²`.
pub fn pe_loss_gradient(
    pi: &TargetPolicy,
    b: &DesignWeights,
    variances: &[f64],
    features: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let bundle = design_matrix(b, features, variances)?;
    let xt = scaled_features(features, variances)?;
    let u = &bundle.inverse * pi.weighted_feature(features)?;
    Ok((0..xt.nrows()).map(|a| -xt.row(a).transpose().dot(&u).powi(2)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Pe,
    AOptimal,
    GOptimal,
    DOptimal,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pe => "pe",
            Self::AOptimal => "a-optimal",
            Self::GOptimal => "g-optimal",
            Self::DOptimal => "d-optimal",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pe" => Ok(Self::Pe),
            "a" | "a-optimal" => Ok(Self::AOptimal),
            "g" | "g-optimal" => Ok(Self::GOptimal),
            "d" | "d-optimal" => Ok(Self::DOptimal),
            other => Err(Error::InvalidInput(format!("unknown objective '{other}' (expected pe, a, g or d)"))),
        }
    }
}

/// Design criterion. With `heteroscedastic = false` the variances are
/// ignored and `x̃ = x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub heteroscedastic: bool,
}

impl Objective {
    pub fn pe() -> Self {
        Self { kind: ObjectiveKind::Pe, heteroscedastic: true }
    }

    pub fn new(kind: ObjectiveKind, heteroscedastic: bool) -> Self {
        Self { kind, heteroscedastic }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Stopping tolerance on the Frank-Wolfe gap: relative to the objective
    /// value for PE and A-optimal, absolute for D-/G-optimal.
    pub epsilon: f64,
    pub max_iter: usize,
}

impl SolverOptions {
    /// `ε = 1/√n` and `10·A·d` iterations.
    pub fn for_budget(n: usize, num_actions: usize, d: usize) -> Self {
        Self { epsilon: 1.0 / (n.max(1) as f64).sqrt(), max_iter: 10 * num_actions * d }
    }

    pub fn tight(num_actions: usize, d: usize) -> Self {
        Self { epsilon: 1e-10, max_iter: 1000 * num_actions * d + 10_000 }
    }
}

/// Output of [`solve_design`].
#[derive(Clone, Debug)]
pub struct DesignSolution {
    pub weights: DesignWeights,
    /// Frank-Wolfe duality gap at the returned iterate. For G-optimal this is
    /// `max_a ‖x̃(a)‖²_{A⁻¹} − d`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Criterion value at the returned iterate (`zᵀA⁻¹z`, `Tr A⁻¹`,
    /// `−log det A`, or the max norm for G-optimal).
    pub value: f64,
}

enum Criterion {
    Pe(DVector<f64>),
    Trace,
    LogDet,
}

struct Problem {
    xt: DMatrix<f64>,
    criterion: Criterion,
}

impl Problem {
    fn value(&self, m: &DMatrix<f64>) -> f64 {
        let Some(ch) = m.clone().cholesky() else {
            return f64::INFINITY;
        };
        let v = match &self.criterion {
            Criterion::Pe(z) => z.dot(&ch.solve(z)),
            Criterion::Trace => ch.inverse().trace(),
            Criterion::LogDet => -2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        };
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }

    /// Directional derivative at `m` along `delta`; `+∞` off the PD cone.
    fn slope(&self, m: &DMatrix<f64>, delta: &DMatrix<f64>) -> f64 {
        let Some(ch) = m.clone().cholesky() else {
            return f64::INFINITY;
        };
        match &self.criterion {
            Criterion::Pe(z) => {
                let u = ch.solve(z);
                -u.dot(&(delta * &u))
            }
            Criterion::Trace => {
                let inv = ch.inverse();
                -(&inv * delta * &inv).trace()
            }
            Criterion::LogDet => -ch.solve(delta).trace(),
        }
    }

    /// Value and gradient at `b`.
    fn value_and_gradient(&self, b: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let m = gram(b, &self.xt);
        let (inv, _) = spd_inverse(&m, "design matrix")?;
        let rows = self.xt.nrows();
        let (value, grad) = match &self.criterion {
            Criterion::Pe(z) => {
                let u = &inv * z;
                let g = (0..rows).map(|a| -self.xt.row(a).transpose().dot(&u).powi(2)).collect();
                (z.dot(&u), g)
            }
            Criterion::Trace => {
                let g = (0..rows).map(|a| -(&inv * self.xt.row(a).transpose()).norm_squared()).collect();
                (inv.trace(), g)
            }
            Criterion::LogDet => {
                let g = (0..rows).map(|a| -linalg::quad_form(&linalg::row(&self.xt, a), &inv)).collect();
                (self.value(&m), g)
            }
        };
        Ok((value, grad, m))
    }
}

/// Smallest root of an increasing slope function on `[lo, hi]` by bisection.
fn bisect_slope(slope: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    lo
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Minimizes the chosen criterion over the simplex.
///
/// Away-step Frank-Wolfe from the uniform design with exact line search
/// (bisection on the directional derivative, falling back to the `2/(k+2)`
/// step).
/// G-optimal designs are computed as D-optimal designs. The result is flagged
/// `converged = false` when `max_iter` is reached before the gap meets
/// `epsilon`; the best iterate is returned either way.
pub fn solve_design(
    obj: Objective,
    features: &DMatrix<f64>,
    variances: &[f64],
    pi: Option<&TargetPolicy>,
    options: SolverOptions,
) -> Result<DesignSolution> {
    let num_actions = features.nrows();
    let d = features.ncols();
    if !(options.epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let xt = if obj.heteroscedastic { scaled_features(features, variances)? } else { features.clone() };
    let criterion = match obj.kind {
        ObjectiveKind::Pe => {
            let pi = pi.ok_or_else(|| Error::InvalidInput("the PE objective requires a target policy".into()))?;
            Criterion::Pe(pi.weighted_feature(features)?)
        }
        ObjectiveKind::AOptimal => Criterion::Trace,
        ObjectiveKind::DOptimal | ObjectiveKind::GOptimal => Criterion::LogDet,
    };
    let relative = matches!(criterion, Criterion::Pe(_) | Criterion::Trace);
    let problem = Problem { xt, criterion };

    let mut b = vec![1.0 / num_actions as f64; num_actions];
    let mut iterations = 0;
    let mut converged = false;
    let (mut value, mut grad, mut m) = problem.value_and_gradient(&b)?;
    let mut gap;
    loop {
        let avg: f64 = b.iter().zip(&grad).map(|(p, g)| p * g).sum();
        let s = argmin(&grad);
        gap = (avg - grad[s]).max(0.0);
        let threshold = if relative { options.epsilon * value.abs() } else { options.epsilon };
        if gap <= threshold {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }

        // Away vertex: worst gradient among active coordinates.
        let mut v = None;
        for a in 0..num_actions {
            if b[a] > 0.0 && v.is_none_or(|w: usize| grad[a] > grad[w]) {
                v = Some(a);
            }
        }
        let v = v.expect("simplex point has an active coordinate");
        let away_gap = grad[v] - avg;
        let xs = problem.xt.row(s).transpose();
        let xv = problem.xt.row(v).transpose();

        let (direction, delta, gamma_max, is_away) = if gap >= away_gap || b[v] >= 1.0 {
            let mut dir: Vec<f64> = b.iter().map(|p| -p).collect();
            dir[s] += 1.0;
            (dir, &xs * xs.transpose() - &m, 1.0, false)
        } else {
            let mut dir = b.clone();
            dir[v] -= 1.0;
            (dir, &m - &xv * xv.transpose(), b[v] / (1.0 - b[v]), true)
        };

        let phi = |g: f64| problem.value(&(&m + &delta * g));
        let slope = |g: f64| problem.slope(&(&m + &delta * g), &delta);
        let mut gamma = if slope(gamma_max) <= 0.0 { gamma_max } else { bisect_slope(slope, 0.0, gamma_max) };
        if !(phi(gamma) <= value) || gamma == 0.0 {
            let fallback = (2.0 / (iterations as f64 + 2.0)).min(gamma_max);
            let f_fallback = phi(fallback);
            if !is_away && f_fallback < value {
                gamma = fallback;
            } else {
                // No descent along either direction: numerically converged.
                break;
            }
        }

        for (p, dp) in b.iter_mut().zip(&direction) {
            *p += gamma * dp;
        }
        if is_away && gamma == gamma_max {
            b[v] = 0.0;
        }
        for p in b.iter_mut() {
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let total: f64 = b.iter().sum();
        b.iter_mut().for_each(|p| *p /= total);
        iterations += 1;

        match problem.value_and_gradient(&b) {
            Ok((nv, ng, nm)) => {
                value = nv;
                grad = ng;
                m = nm;
            }
            Err(_) => {
                // Step landed on a singular design; undo it.
                for (p, dp) in b.iter_mut().zip(&direction) {
                    *p -= gamma * dp;
                }
                b.iter_mut().for_each(|p| *p = p.max(0.0));
                let total: f64 = b.iter().sum();
                b.iter_mut().for_each(|p| *p /= total);
                break;
            }
        }
    }

    if matches!(obj.kind, ObjectiveKind::DOptimal | ObjectiveKind::GOptimal) {
        reduce_support(&mut b, &problem.xt);
        let (nv, ng, nm) = problem.value_and_gradient(&b)?;
        let avg: f64 = b.iter().zip(&ng).map(|(p, g)| p * g).sum();
        gap = (avg - ng.iter().copied().fold(f64::INFINITY, f64::min)).max(0.0);
        value = nv;
        m = nm;
    }
    let weights = DesignWeights::new(b)?;
    if obj.kind == ObjectiveKind::GOptimal {
        let (inv, _) = spd_inverse(&m, "design matrix")?;
        let max_norm = (0..num_actions)
            .map(|a| linalg::quad_form(&linalg::row(&problem.xt, a), &inv))
            .fold(f64::NEG_INFINITY, f64::max);
        return Ok(DesignSolution {
            weights,
            gap: (max_norm - d as f64).max(0.0),
            iterations,
            converged,
            value: max_norm,
        });
    }
    Ok(DesignSolution { weights, gap, iterations, converged, value })
}

/// Removes support points while keeping `Σ_a b(a) x̃(a)x̃(a)ᵀ` fixed, until at
/// most `d(d+1)/2` remain: each step moves `b` along a null direction of the
/// map `b ↦ A_b` restricted to the support until one weight reaches zero,
/// then renormalizes. At a D-optimal design the null directions sum to zero,
/// so the renormalization is a no-op up to rounding.
pub fn reduce_support(probs: &mut [f64], xt: &DMatrix<f64>) {
    let p = linalg::sym_dim(xt.ncols());
    loop {
        let support: Vec<usize> = (0..probs.len()).filter(|&a| probs[a] > 0.0).collect();
        if support.len() <= p {
            return;
        }
        // Null vector of the p×(p+1) block, padded to a square matrix.
        let cols = &support[..=p];
        let mut g = DMatrix::<f64>::zeros(p + 1, p + 1);
        for (j, &a) in cols.iter().enumerate() {
            for (i, h) in linalg::halfvec_row(&linalg::row(xt, a)).into_iter().enumerate() {
                g[(i, j)] = h;
            }
        }
        let svd = g.svd(false, true);
        let v_t = svd.v_t.expect("requested V");
        let k = svd.singular_values.imin();
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        if v.iter().all(|&x| x <= 0.0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let (mut t, mut hit) = (f64::INFINITY, 0);
        for (j, &a) in cols.iter().enumerate() {
            if v[j] > 0.0 && probs[a] / v[j] < t {
                t = probs[a] / v[j];
                hit = a;
            }
        }
        for (j, &a) in cols.iter().enumerate() {
            probs[a] = (probs[a] - t * v[j]).max(0.0);
        }
        probs[hit] = 0.0;
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|q| *q /= total);
    }
}

/// Kiefer-Wolfowitz quantities of a design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KwCertificate {
    /// `Σ_a b(a) ‖x̃(a)‖²_{A⁻¹}`; equals `d` for every invertible design.
    pub weighted_avg_norm: f64,
    /// `max_a ‖x̃(a)‖²_{A⁻¹}`; equals `d` exactly at a D-optimal design.
    pub max_norm: f64,
    /// `|{a : b(a) > 1e-6}|`.
    pub support_size: usize,
    /// `Tr(A⁻¹)`.
    pub trace_inverse: f64,
}

pub fn kw_certificate(b: &DesignWeights, features: &DMatrix<f64>, variances: &[f64]) -> Result<KwCertificate> {
    let bundle = design_matrix(b, features, variances)?;
    let xt = scaled_features(features, variances)?;
    let norms: Vec<f64> = (0..xt.nrows()).map(|a| linalg::quad_form(&linalg::row(&xt, a), &bundle.inverse)).collect();
    Ok(KwCertificate {
        weighted_avg_norm: norms.iter().zip(b.probs()).map(|(n, p)| n * p).sum(),
        max_norm: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        support_size: b.support_size(),
        trace_inverse: bundle.inverse.trace(),
    })
}

/// `V = Σ_{a,a'} w(a) w(a')ᵀ = z zᵀ`.
pub fn policy_outer_matrix(pi: &TargetPolicy, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let z = pi.weighted_feature(features)?;
    Ok(&z * z.transpose())
}

/// `(λ_d(V)·d/n, λ₁(V)·d/n)` for a symmetric PSD `V`.
pub fn corollary1_bounds_from_v(v: &DMatrix<f64>, n: usize) -> (f64, f64) {
    let d = v.nrows();
    let (vals, _) = sym_eigen_desc(v);
    let scale = d as f64 / n as f64;
    (vals[d - 1].max(0.0) * scale, vals[0] * scale)
}

/// Loss bounds `(λ_d(V)·d/n, λ₁(V)·d/n)` with `V` built from the policy.
///
/// They bracket `L_n` at a trace-optimal design only when `Tr(A⁻¹)` there is
/// at most `d`; [`trace_sandwich`] gives the bracket that always holds.
pub fn corollary1_bounds(pi: &TargetPolicy, features: &DMatrix<f64>, n: usize) -> Result<(f64, f64)> {
    Ok(corollary1_bounds_from_v(&policy_outer_matrix(pi, features)?, n))
}

/// `(λ_d(V)·Tr(A⁻¹)/n, λ₁(V)·Tr(A⁻¹)/n)`, which brackets `L_n(b)` for any
/// invertible design.
pub fn trace_sandwich(
    pi: &TargetPolicy,
    b: &DesignWeights,
    variances: &[f64],
    features: &DMatrix<f64>,
    n: usize,
) -> Result<(f64, f64)> {
    let trace = design_matrix(b, features, variances)?.inverse.trace();
    let (lo, hi) = corollary1_bounds(pi, features, n)?;
    let d = features.ncols() as f64;
    Ok((lo * trace / d, hi * trace / d))
}

/// Upper bound on `|∂_a(nL)(b) − ∂_a(nL)(b')|`:
///
/// `λ₁(V) H_U² / σ²(a) · [ (m_b λ_min(W))⁻² + (m_b' λ_min(W))⁻² ]`
///
/// with `m_b = min_a b(a)/σ²(a)` and `W = Σ_a π(a)² x(a)x(a)ᵀ`. Requires
/// strictly positive designs and a target policy whose support spans `R^d`.
pub fn gradient_difference_bound(
    pi: &TargetPolicy,
    b: &DesignWeights,
    b_other: &DesignWeights,
    variances: &[f64],
    features: &DMatrix<f64>,
    action: usize,
) -> Result<f64> {
    check_inputs(b.len(), features, variances)?;
    check_inputs(b_other.len(), features, variances)?;
    if action >= features.nrows() {
        return Err(Error::ActionOutOfRange { index: action, count: features.nrows() });
    }
    let w_probs: Vec<f64> = pi.probs().iter().map(|p| p * p).collect();
    let w = gram(&w_probs, features);
    let (w_vals, _) = sym_eigen_desc(&w);
    let lambda_min_w = w_vals[w_vals.len() - 1];
    if !(lambda_min_w > 0.0) {
        return Err(Error::Singular("policy-weighted features do not span R^d".into()));
    }
    let (_, lambda_1) = corollary1_bounds(pi, features, features.ncols())?;
    let h_u_sq = (0..features.nrows()).map(|a| features.row(a).norm_squared()).fold(0.0, f64::max);
    let min_ratio =
        |d: &DesignWeights| d.probs().iter().zip(variances).map(|(p, v)| p / v).fold(f64::INFINITY, f64::min);
    let term = |m: f64| 1.0 / (m * lambda_min_w).powi(2);
    Ok(lambda_1 * h_u_sq / variances[action] * (term(min_ratio(b)) + term(min_ratio(b_other))))
}

/// Integer pull counts summing to exactly `m`: floors of `b(a)·m`, then the
/// remainder to the largest fractional parts (ties to the lowest index).
pub fn allocate(probs: &[f64], m: usize) -> Vec<usize> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() {
        return Vec::new();
    }
    let scaled: Vec<f64> = probs
        .iter()
        .map(|p| if total > 0.0 { p.max(0.0) / total * m as f64 } else { m as f64 / probs.len() as f64 })
        .collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = scaled[i] - scaled[i].floor();
        let fj = scaled[j] - scaled[j].floor();
        fj.partial_cmp(&fi).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut k = 0;
    while assigned < m {
        counts[order[k % order.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    while assigned > m {
        // Only reachable through rounding noise in the floors.
        let i = order.iter().rev().copied().find(|&i| counts[i] > 0).expect("positive count");
        counts[i] -= 1;
        assigned -= 1;
    }
    counts
}
