//! The five estimation pipelines: LOCF, regression calibration (with and
//! without post-event visits), multiple imputation and the joint model.

mod jm;
mod locf;
mod mi;
mod rc;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmm::LmmError;
use crate::numerics::NumericsError;
use crate::survival::SurvivalError;

pub use jm::{estimate_jm, fit_jm, jm_loglik, JmBaseline, JmFit, JmOptions, JmProblem};
pub use locf::{estimate_locf, locf_paths};
pub use mi::{estimate_mi, estimate_mi_with, rubin_pool, ImputationModel, MiOptions};
pub use rc::{bootstrap_variance, estimate_rc, rc_paths, BootstrapSummary};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

pub const DEFAULT_N_BOOT: usize = 500;
pub const DEFAULT_IMPUTATIONS: usize = 10;
pub const DEFAULT_N_QUAD: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Locf,
    Rc,
    PeRc,
    Mi,
    Jm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Locf, Method::Rc, Method::PeRc, Method::Mi, Method::Jm];

    pub fn label(self) -> &'static str {
        match self {
            Method::Locf => "locf",
            Method::Rc => "rc",
            Method::PeRc => "pe_rc",
            Method::Mi => "mi",
            Method::Jm => "jm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "locf" => Ok(Method::Locf),
            "rc" => Ok(Method::Rc),
            "pe_rc" | "perc" => Ok(Method::PeRc),
            "mi" => Ok(Method::Mi),
            "jm" => Ok(Method::Jm),
            _ => Err(EstimatorError::Argument(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub method: Method,
    pub gamma_hat: f64,
    pub se_total: f64,
    pub ci95: (f64, f64),
    pub converged: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateResult {
    pub fn new(method: Method, gamma_hat: f64, se_total: f64, converged: bool) -> Self {
        EstimateResult {
            method,
            gamma_hat,
            se_total,
            ci95: (gamma_hat - Z_975 * se_total, gamma_hat + Z_975 * se_total),
            converged,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci95.0 <= truth && truth <= self.ci95.1
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EstimatorError {
    #[error("{stage}: {source}")]
    Lmm {
        stage: &'static str,
        #[source]
        source: LmmError,
    },
    #[error("{stage}: {source}")]
    Cox {
        stage: &'static str,
        #[source]
        source: SurvivalError,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{failed} of {total} bootstrap refits failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("joint model did not converge (gradient norm {gradient_norm:.3e} after {iterations} iterations)")]
    JmNonConvergence {
        gradient_norm: f64,
        iterations: usize,
        trace: Vec<Vec<f64>>,
    },
    #[error("joint model Hessian is not positive definite at the optimum: {0}")]
    JmHessian(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn cox_err(stage: &'static str) -> impl Fn(SurvivalError) -> EstimatorError {
    move |source| EstimatorError::Cox { stage, source }
}

fn lmm_err(stage: &'static str) -> impl Fn(LmmError) -> EstimatorError {
    move |source| EstimatorError::Lmm { stage, source }
}
