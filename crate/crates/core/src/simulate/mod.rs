//! Cohort generation under the joint model: random-effects trajectories,
//! proportional hazards given the true exposure, scheduled visits with
//! classical measurement error, truncation at the event.

mod calibrate;
mod generate;
mod presets;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::numerics::{cholesky_psd, Matrix};
use crate::survival::ParametricBaseline;

pub use calibrate::{
    calibrate_weibull_scale, expected_event_proportion, main_weibull_scales, EVENT_PROPORTIONS, WEIBULL_SHAPE,
};
pub use generate::{generate, write_truth, write_truth_to, GeneratedTruth};
pub use presets::{main_scenario, preset, MAIN_SCENARIOS};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimulateError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("unknown scenario label '{0}'")]
    UnknownLabel(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Linear,
    Quadratic,
}

impl TrajectoryKind {
    pub fn degree(self) -> usize {
        match self {
            TrajectoryKind::Linear => 1,
            TrajectoryKind::Quadratic => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub label: String,
    pub n_subjects: usize,
    pub gamma_true: f64,
    pub trajectory: TrajectoryKind,
    /// Random-effects covariance. Positive semi-definite; a zero matrix
    /// gives every subject the population trajectory.
    pub re_cov: Matrix,
    pub fixed_effects: Vec<f64>,
    pub error_sd: f64,
    pub baseline: ParametricBaseline,
    pub visit_spacing: f64,
    pub horizon: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let dim = self.trajectory.degree() + 1;
        let fail = |m: String| Err(SimulateError::Config(m));
        if self.n_subjects == 0 {
            return fail("n_subjects must be positive".into());
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return fail(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.visit_spacing > 0.0) {
            return fail(format!("visit_spacing must be positive, got {}", self.visit_spacing));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate));
        }
        if !(self.error_sd >= 0.0) || !self.gamma_true.is_finite() {
            return fail("error_sd must be nonnegative and gamma finite".into());
        }
        if self.fixed_effects.len() != dim || self.re_cov.rows() != dim || self.re_cov.cols() != dim {
            return fail(format!(
                "{:?} trajectory needs {dim} fixed effects and a {dim}x{dim} re_cov",
                self.trajectory
            ));
        }
        if !self.re_cov.is_symmetric(1e-12) || cholesky_psd(&self.re_cov, 1e-14).is_err() {
            return fail("re_cov must be symmetric positive semi-definite".into());
        }
        self.baseline
            .validate()
            .map_err(|e| SimulateError::Config(e.to_string()))
    }

    /// Number of scheduled visits, `floor(horizon / spacing) + 1`.
    pub fn scheduled_visits(&self) -> usize {
        (self.horizon / self.visit_spacing + 1e-9).floor() as usize + 1
    }

    /// Variance of the true exposure at time `t`, `F(t)ᵀ B F(t)`.
    pub fn exposure_variance(&self, t: f64) -> f64 {
        let f: Vec<f64> = (0..=self.trajectory.degree()).map(|k| t.powi(k as i32)).collect();
        let bf = self.re_cov.mat_vec(&f);
        f.iter().zip(&bf).map(|(a, b)| a * b).sum()
    }
}
