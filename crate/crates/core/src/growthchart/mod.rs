//! Generalized-gamma normative growth models.

mod fp;
mod gg;
mod model;
pub mod optim;

use thiserror::Error;

pub use fp::{fp_basis, fp_candidates, FpSpec, FP_POWERS};
pub use gg::{gg_cdf, gg_logpdf, gg_pdf, gg_quantile, GGParams};
pub use model::{
    age_grid, centile, compare_centiles, fit, fit_candidates, percentile_curves, read_centiles_csv, write_centiles_csv,
    write_curves_csv, CurveRow, FitOptions, GrowthModel, GrowthTruth, PenalizedLikelihood, DAYS_PER_YEAR,
    DEFAULT_PROBS,
};

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid fractional polynomial: {0}")]
    InvalidSpec(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("need at least {needed} sessions, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("length mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
