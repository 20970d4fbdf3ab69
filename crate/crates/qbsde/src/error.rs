//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by origin so the CLI can map them onto distinct
/// exit codes: configuration/validation problems versus numerical failures.
#[derive(Debug, Error)]
pub enum QbsdeError {
    #[error("dimension mismatch: expected {expected}, got {got}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("constraint set is not a cone: {0}")]
    NotACone(String),

    #[error("projection QP did not converge after {iterations} iterations (kkt residual {kkt_residual:.3e})")]
    QpNonConvergence { iterations: usize, kkt_residual: f64 },

    #[error("concave maximization did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    MaximizationNonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("sigma*sigma^T is singular at t={t}, state={state} (condition number {condition:.3e})")]
    SingularVolatility { t: f64, state: String, condition: f64 },

    #[error("model validation failed: {0}")]
    ModelValidation(String),

    #[error("non-finite coefficient at t={t}, state={state}: {what}")]
    NonFiniteCoefficient { t: f64, state: String, what: String },

    #[error("dual candidate rejected: f* is infinite at path {path}, step {step}")]
    InfiniteDualDriver { path: usize, step: usize },

    #[error("martingale-measure constraint violated: {0}")]
    MartingaleConstraint(String),

    #[error("payoff must be bounded for the large-alpha limit: {0}")]
    UnboundedPayoff(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl QbsdeError {
    pub fn dim(expected: usize, got: usize, context: &str) -> Self {
        QbsdeError::DimensionMismatch {
            expected,
            got,
            context: context.to_string(),
        }
    }

    /// True for errors caused by bad configuration or failed validation
    /// rather than by numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            QbsdeError::Config(_)
                | QbsdeError::ModelValidation(_)
                | QbsdeError::Expr(_)
                | QbsdeError::DimensionMismatch { .. }
                | QbsdeError::NotACone(_)
                | QbsdeError::UnboundedPayoff(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, QbsdeError>;
