//! Uncertainty-quantified contemporaneous health index (UQ-CHI).
//!
//! Learns a Gaussian posterior over the weights of a linear, monotone health
//! index from irregular multivariate longitudinal data. Training reduces to a
//! concave dual problem with one multiplier per subject on the box
//! `0 <= lambda_n < c`; prediction and confidence scores are closed form, and a
//! rejection option abstains on the least confident subjects.
//!
//! Module map:
//!
//! - [`panel`]: longitudinal data model, CSV ingestion, standardization,
//!   label priors and per-subject aggregates.
//! - [`med`]: the dual problem, its objective/gradient, the box-constrained
//!   solver and the weight posterior.
//! - [`predictor`]: index trajectories, predictions, confidence and rejection.
//! - [`chi`]: the convex CHI objective and a proximal-subgradient baseline.
//! - [`simulator`]: deterministic synthetic cohorts with monotone degradation.
//! - [`harness`]: experiment grids, cross-validation and result tables.
//! - [`cli`]: command implementations behind the `uqchi` binary.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod chi;
pub mod cli;
pub mod harness;
pub mod med;
pub mod panel;
pub mod predictor;
pub mod simulator;

mod linalg;

use thiserror::Error;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Panel(#[from] panel::PanelError),
    #[error(transparent)]
    Dual(#[from] med::DualError),
    #[error(transparent)]
    Predict(#[from] predictor::PredictError),
    #[error(transparent)]
    Chi(#[from] chi::ChiError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True when the failure is numerical (solver divergence, non-convergence)
    /// rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Dual(e) => e.is_numerical(),
            Error::Chi(e) => e.is_numerical(),
            Error::Harness(harness::HarnessError::Cell { source, .. }) => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
