//! Optimal experimental design for off-policy evaluation in linear bandits
//! with heteroscedastic noise.
//!
//! The crate models a linear bandit whose reward noise variance
//! `σ²(a) = x(a)ᵀ Σ* x(a)` depends on the action, computes behavior
//! proportions that minimize the mean squared error of a target policy's
//! value estimate, and provides the data-collection agents, estimators and
//! Monte-Carlo harness used to evaluate them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod design;
pub mod error;
pub mod estimators;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sim;

pub use agents::{run_agent, AgentKind, AgentSpec, CollectionResult, EnvView, OnPolicyVariant, OracleView};
pub use design::{
    allocate, corollary1_bounds, design_matrix, kw_certificate, pe_loss, pe_loss_gradient, solve_design,
    DesignSolution, DesignWeights, KwCertificate, Objective, ObjectiveKind, SolverOptions,
};
pub use error::{Error, Result};
pub use estimators::{fit_sigma, ols_fit, pca_exploration_set, wls_fit, Dataset, EstimatePair, Observation};
pub use ingest::{fit_semisynthetic, load_csv, make_threshold_policy, subsample_actions, RawTable};
pub use model::{Environment, NoiseFamily, NoiseModel, TargetPolicy};
pub use sim::{
    closed_form_vs_mc, concentration_probe, empirical_regret, mse_experiment, MseReport, RegretEstimator, RegretReport,
    SimConfig,
};
