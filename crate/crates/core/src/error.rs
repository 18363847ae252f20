//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv row {row}, column `{col}`: {msg}")]
    Parse { row: usize, col: String, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("horizon rule unsatisfiable: {0}")]
    Horizon(String),

    #[error(
        "at-risk hazard sum underflowed at t = {t} (S = {s:.3e}); \
         the risk set is too small before the horizon — choose a smaller tau"
    )]
    AtRiskUnderflow { t: f64, s: f64 },

    #[error(
        "product-integral factor 1 - S'*dC = {factor:.3e} <= 0 at t = {t}; \
         the discrete path left the domain of the theory — choose a smaller tau"
    )]
    ProductIntegral { t: f64, factor: f64 },

    #[error(
        "information matrix is numerically singular (rcond = {rcond:.3e}); \
         covariates may lack variation near the current parameter"
    )]
    SingularInformation { rcond: f64 },

    #[error("solver did not converge: {msg}")]
    NoConvergence {
        msg: String,
        /// Diagnostics from the last iterate, for partial reporting.
        partial: Option<Box<crate::mestimate::FitResult>>,
    },

    #[error("iterates left the parameter box |theta_k| <= {bound} (hazard-bound domain)")]
    Diverged { bound: f64 },

    #[error("{0}")]
    Domain(String),
}
