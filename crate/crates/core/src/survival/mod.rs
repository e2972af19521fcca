//! Cox partial likelihood with time-varying exposure paths, Nelson-Aalen,
//! and parametric baseline hazards.

pub mod baseline;
pub mod cox;
pub mod step;

use thiserror::Error;

pub use baseline::{cumulative_hazard, ParametricBaseline};
pub use cox::{fit_cox, fit_cox_data, CoxData, CoxFit, CoxOptions};
pub use step::{nelson_aalen, StepFunction};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SurvivalError {
    #[error("no events in the cohort")]
    NoEvents,
    #[error("coefficient {column} is not identifiable (no contrast within risk sets)")]
    NonIdentifiable { column: usize },
    #[error("partial likelihood is monotone; coefficients diverge after {} iterates", trace.len())]
    Divergence { trace: Vec<Vec<f64>> },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid baseline hazard: {0}")]
    Baseline(String),
}
