//! Semi-synthetic environments from regression datasets.
//!
//! Rows of a CSV table become actions, a weighted least-squares fit provides
//! `θ*` and a squared-residual fit provides `Σ*`. Threshold policies put a
//! small total mass on the high-variance actions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::agents::{clamp_variances, DEFAULT_SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::estimators::{fit_sigma, ols_fit_with_fallback, wls_fit};
use crate::linalg;
use crate::model::{Environment, NoiseModel, TargetPolicy};
use crate::rng::stream;

/// Cleaned numeric table.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub features: DMatrix<f64>,
    pub target: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Rows removed for missing or non-numeric entries.
    pub dropped: usize,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Reads a comma-separated file with a header row.
///
/// `feature_cols = None` takes every column except the target. Rows with an
/// empty, non-numeric or non-finite entry in a used column are dropped and
/// counted. With `normalize`, each feature column is divided by its largest
/// absolute value.
pub fn load_csv(
    path: impl AsRef<Path>,
    feature_cols: Option<&[String]>,
    target_col: &str,
    normalize: bool,
) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("column '{name}' not found (have: {})", headers.join(", "))))
    };
    let target_idx = find(target_col)?;
    let feature_names: Vec<String> = match feature_cols {
        Some(cols) => cols.to_vec(),
        None => headers.iter().filter(|h| h.as_str() != target_col).cloned().collect(),
    };
    if feature_names.is_empty() {
        return Err(Error::InvalidInput("no feature columns selected".into()));
    }
    let feature_idx: Vec<usize> = feature_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let parse = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    let mut values = Vec::new();
    let mut target = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = record?;
        let row: Option<Vec<f64>> = feature_idx.iter().map(|&i| record.get(i).and_then(parse)).collect();
        match (row, record.get(target_idx).and_then(parse)) {
            (Some(row), Some(y)) => {
                values.extend(row);
                target.push(y);
            }
            _ => dropped += 1,
        }
    }
    if target.is_empty() {
        return Err(Error::InvalidInput("no usable rows after cleaning".into()));
    }
    let mut features = DMatrix::from_row_slice(target.len(), feature_idx.len(), &values);
    if normalize {
        for mut col in features.column_iter_mut() {
            let max = col.amax();
            if max > 0.0 {
                col /= max;
            }
        }
    }
    Ok(RawTable {
        features,
        target: DVector::from_vec(target),
        feature_names,
        target_name: target_col.to_string(),
        dropped,
    })
}

/// Fitted environment plus the standard errors of the final WLS `θ̂`.
#[derive(Clone, Debug)]
pub struct SemiSyntheticFit {
    pub env: Environment,
    pub theta_stderr: Vec<f64>,
}

/// Alternating fit: OLS `θ̂`, then `iters` rounds of (covariance fit on the
/// squared residuals, WLS with the induced variances).
pub fn fit_semisynthetic(table: &RawTable, iters: usize) -> Result<Environment> {
    Ok(fit_semisynthetic_detailed(table, iters)?.env)
}

pub fn fit_semisynthetic_detailed(table: &RawTable, iters: usize) -> Result<SemiSyntheticFit> {
    let (rows, d) = table.features.shape();
    if iters == 0 {
        return Err(Error::InvalidInput("iters must be at least 1".into()));
    }
    if rows < linalg::sym_dim(d) {
        return Err(Error::InvalidInput(format!(
            "{rows} rows cannot identify a {d}x{d} covariance (need {})",
            linalg::sym_dim(d)
        )));
    }
    let x = &table.features;
    let y = &table.target;
    let (mut theta, _) = ols_fit_with_fallback(x, y)?;
    let mut sigma = DMatrix::zeros(d, d);
    let mut variances = Vec::new();
    for _ in 0..iters {
        let resid = (y - x * &theta).map(|e| e * e);
        sigma = fit_sigma(x, &resid)?;
        let raw: Vec<f64> = (0..rows).map(|a| linalg::quad_form(&linalg::row(x, a), &sigma)).collect();
        if raw.iter().all(|&v| v <= 0.0) {
            return Err(Error::InvalidInput(
                "fitted noise covariance is zero (the targets have no residual variance); \
                 add noise or a variance floor before fitting"
                    .into(),
            ));
        }
        variances = clamp_variances(&raw, DEFAULT_SIGMA_FLOOR);
        theta = wls_fit(x, y, &variances)?;
    }

    let weighted = DMatrix::from_fn(d, d, |i, j| (0..rows).map(|t| x[(t, i)] * x[(t, j)] / variances[t]).sum::<f64>());
    let (cov, _) = linalg::spd_inverse(&weighted, "weighted normal matrix")?;
    let theta_stderr = (0..d).map(|i| cov[(i, i)].sqrt()).collect();

    let max_var = variances.iter().copied().fold(0.0, f64::max);
    let env =
        Environment::new(x.clone(), theta, sigma, NoiseModel::default_for(max_var))?.with_metadata(serde_json::json!({
            "source": "semi-synthetic",
            "features": table.feature_names,
            "target": table.target_name,
            "rows": rows,
            "iters": iters,
        }));
    Ok(SemiSyntheticFit { env, theta_stderr })
}

/// Total mass `p_low` spread uniformly over actions with variance above
/// `tau`, the rest spread uniformly over the others.
pub fn make_threshold_policy(env: &Environment, tau: f64, p_low: f64) -> Result<TargetPolicy> {
    if !(p_low > 0.0 && p_low < 1.0) {
        return Err(Error::InvalidInput(format!("p_low must be in (0, 1), got {p_low}")));
    }
    let high: Vec<bool> = env.variances().iter().map(|&v| v > tau).collect();
    let k = high.iter().filter(|&&h| h).count();
    let rest = high.len() - k;
    if k == 0 || rest == 0 {
        return Err(Error::InvalidPolicy(format!(
            "threshold {tau} puts all {} actions on one side; pick tau between the smallest and largest variance",
            high.len()
        )));
    }
    let probs = high.iter().map(|&h| if h { p_low / k as f64 } else { (1.0 - p_low) / rest as f64 }).collect();
    TargetPolicy::new(probs)
}

/// Threshold that marks exactly the `k` highest-variance actions (midpoint
/// between the k-th and (k+1)-th largest variance).
pub fn tau_for_high_count(env: &Environment, k: usize) -> Result<f64> {
    let mut v = env.variances().to_vec();
    if k == 0 || k >= v.len() {
        return Err(Error::InvalidInput(format!("high-variance count must be in 1..{}", v.len())));
    }
    v.sort_by(|a, b| b.total_cmp(a));
    if v[k - 1] == v[k] {
        return Err(Error::InvalidInput(format!("variances tie at rank {k}; no threshold separates them")));
    }
    Ok(0.5 * (v[k - 1] + v[k]))
}

/// `m` rows drawn uniformly without replacement, kept in their original order.
pub fn subsample_actions(table: &RawTable, m: usize, seed: u64) -> Result<RawTable> {
    let rows = table.rows();
    if m > rows {
        return Err(Error::InvalidInput(format!("cannot take {m} rows from {rows}")));
    }
    let mut rng = stream(seed, &[]);
    let mut idx = index::sample(&mut rng, rows, m).into_vec();
    idx.sort_unstable();
    Ok(RawTable {
        features: table.features.select_rows(&idx),
        target: DVector::from_iterator(m, idx.iter().map(|&i| table.target[i])),
        feature_names: table.feature_names.clone(),
        target_name: table.target_name.clone(),
        dropped: table.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_small_table() {
        let f = write_csv("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let t = load_csv(f.path(), None, "y", false).unwrap();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.dropped, 0);
        assert_eq!(t.target[2], 9.0);

        let t = load_csv(f.path(), None, "y", true).unwrap();
        assert!((t.features[(0, 0)] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(t.features[(2, 1)], 1.0);
    }

    #[test]
    fn bad_rows_are_dropped() {
        let f = write_csv("a,b,y\n1,2,3\nNaN,5,6\n7,,9\n1,x,2\n2,2,2\n");
        let t = load_csv(f.path(), None, "y", false).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.dropped, 3);
        assert!(load_csv(f.path(), None, "z", false).is_err());
        let only_bad = write_csv("a,y\nfoo,1\n");
        assert!(load_csv(only_bad.path(), None, "y", false).is_err());
    }

    #[test]
    fn explicit_columns() {
        let f = write_csv("a,b,c,y\n1,2,3,4\n5,6,7,8\n");
        let cols = vec!["c".to_string(), "a".to_string()];
        let t = load_csv(f.path(), Some(&cols), "y", false).unwrap();
        assert_eq!(t.features.row(1).iter().copied().collect::<Vec<_>>(), vec![7.0, 5.0]);
    }

    #[test]
    fn zero_residual_table_errors() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let y = &x * DVector::from_vec(vec![1.0, 2.0]);
        let table = RawTable {
            features: x,
            target: y,
            feature_names: vec!["a".into(), "b".into()],
            target_name: "y".into(),
            dropped: 0,
        };
        let err = fit_semisynthetic(&table, 2).unwrap_err();
        assert!(err.to_string().contains("variance floor"));
    }

    #[test]
    fn threshold_policy_masses() {
        let features = DMatrix::from_fn(400, 1, |i, _| if i < 30 { 2.0 } else { 1.0 });
        let env = Environment::new(
            features,
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            NoiseModel::gaussian(),
        )
        .unwrap();
        let pi = make_threshold_policy(&env, 2.0, 0.1).unwrap();
        assert_eq!(pi.probs()[0], 0.1 / 30.0);
        assert_eq!(pi.probs()[399], 0.9 / 370.0);
        assert!((pi.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(make_threshold_policy(&env, 10.0, 0.1).is_err());
        assert!((tau_for_high_count(&env, 30).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn equal_split_half_mass_is_uniform() {
        let features = DMatrix::from_fn(6, 1, |i, _| if i < 3 { 2.0 } else { 1.0 });
        let env = Environment::new(
            features,
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            NoiseModel::gaussian(),
        )
        .unwrap();
        let pi = make_threshold_policy(&env, 2.0, 0.5).unwrap();
        assert!(pi.probs().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn subsampling() {
        let table = RawTable {
            features: DMatrix::from_fn(1500, 2, |i, j| (i * 2 + j) as f64),
            target: DVector::from_fn(1500, |i, _| i as f64),
            feature_names: vec!["a".into(), "b".into()],
            target_name: "y".into(),
            dropped: 0,
        };
        let s = subsample_actions(&table, 400, 3).unwrap();
        assert_eq!(s.rows(), 400);
        assert_eq!(s, subsample_actions(&table, 400, 3).unwrap());
        assert!(s.target.as_slice().windows(2).all(|w| w[0] < w[1]));
        let all = subsample_actions(&table, 1500, 9).unwrap();
        assert_eq!(all, table);
        assert!(subsample_actions(&table, 1501, 0).is_err());
    }
}
