//! Linear mixed calibration model: maximum likelihood, BLUP, posterior
//! draws and predicted exposure paths.

mod design;
mod fit;
mod predict;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeBasis;
use crate::numerics::NumericsError;
use crate::survival::StepFunction;

pub use design::SubjectDesign;
pub use fit::{fit_lmm, fit_lmm_with, loglik, loglik_and_score, LmmFit, LmmParams, ParamLayout};
pub(crate) use predict::draw_random_effects;
pub use predict::{blup, draw_parameters, posterior, posterior_draw, predict_exposure, predict_with, PredictMode};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LmmError {
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("{visits} visits cannot identify {params} fixed parameters")]
    TooFewVisits { visits: usize, params: usize },
    #[error("maximization did not converge (gradient norm {gradient_norm:.3e}); best iterate {best:?}")]
    NonConvergence { best: Vec<f64>, gradient_norm: f64 },
    #[error("information matrix is singular at the optimum; consider a smaller basis ({0})")]
    SingularHessian(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-visit regressor in `G(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regressor {
    /// Baseline covariate, constant over time.
    Covariate { name: String },
    /// Cumulative hazard estimate at the subject's own exit time, `Λ̂(Tᵢ)`.
    NelsonAalen { estimate: StepFunction },
    /// 1 at the subject's last visit. When predicting at arbitrary `t` it is
    /// 1 from the last visit onwards.
    LastVisit,
    /// As `LastVisit`, but only for subjects whose exit is an event.
    EventLastVisit,
    /// Event indicator `Dᵢ`, constant over time.
    EventIndicator,
}

impl Regressor {
    /// Whether this regressor switches on at the last visit of `s`, or
    /// `None` for time-constant regressors.
    pub(crate) fn last_visit_flag(&self, s: &crate::data::SubjectRecord) -> Option<bool> {
        match self {
            Regressor::LastVisit => Some(true),
            Regressor::EventLastVisit => Some(s.event),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmSpec {
    pub fixed_basis: Arc<TimeBasis>,
    /// Must be a leading block of `fixed_basis` (same family, dimension not
    /// larger); in practice the two are equal.
    pub random_basis: Arc<TimeBasis>,
    pub extra_regressors: Vec<(String, Regressor)>,
}

impl LmmSpec {
    pub fn new(fixed_basis: TimeBasis, random_basis: TimeBasis) -> Self {
        LmmSpec {
            fixed_basis: Arc::new(fixed_basis),
            random_basis: Arc::new(random_basis),
            extra_regressors: Vec::new(),
        }
    }

    /// Same basis for fixed and random parts.
    pub fn shared(basis: TimeBasis) -> Self {
        let b = Arc::new(basis);
        LmmSpec {
            fixed_basis: b.clone(),
            random_basis: b,
            extra_regressors: Vec::new(),
        }
    }

    pub fn linear() -> Self {
        LmmSpec::shared(TimeBasis::polynomial(1))
    }

    pub fn with_regressor(mut self, name: impl Into<String>, r: Regressor) -> Self {
        self.extra_regressors.push((name.into(), r));
        self
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            p_fixed: self.fixed_basis.dimension(),
            p_extra: self.extra_regressors.len(),
            q: self.random_basis.dimension(),
        }
    }

    pub fn validate(&self) -> Result<(), LmmError> {
        if self.random_basis.dimension() > self.fixed_basis.dimension() {
            return Err(LmmError::Spec(format!(
                "random basis dimension {} exceeds fixed basis dimension {}",
                self.random_basis.dimension(),
                self.fixed_basis.dimension()
            )));
        }
        if self.random_basis.dimension() == 0 {
            return Err(LmmError::Spec("random basis is empty".into()));
        }
        Ok(())
    }
}
