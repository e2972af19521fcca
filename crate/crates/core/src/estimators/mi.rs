use serde::{Deserialize, Serialize};

use super::{cox_err, lmm_err, EstimateResult, EstimatorError, Method, DEFAULT_IMPUTATIONS};
use crate::data::{truncate_at_event, Cohort};
use crate::lmm::{draw_parameters, draw_random_effects, fit_lmm, predict_with, LmmSpec, Regressor};
use crate::numerics::RngStream;
use crate::par;
use crate::survival::{fit_cox, nelson_aalen};

/// Pools `M ≥ 2` completed-data fits: the mean estimate and
/// `mean(variances) + (1 + 1/M) · sample variance of the estimates`.
pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<(f64, f64), EstimatorError> {
    let m = estimates.len();
    if m < 2 || variances.len() != m {
        return Err(EstimatorError::Argument(format!(
            "Rubin pooling needs at least 2 matched estimates and variances, got {m} and {}",
            variances.len()
        )));
    }
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(EstimatorError::Argument(
            "within-imputation variances must be positive".into(),
        ));
    }
    let mf = m as f64;
    let mean = estimates.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (mf - 1.0);
    Ok((mean, within + (1.0 + 1.0 / mf) * between))
}

/// Outcome information added to the imputation model besides `Λ̂(Tᵢ)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationModel {
    /// Indicator of each subject's last visit.
    #[default]
    LastVisit,
    /// Event indicator `Dᵢ` plus the last-visit indicator restricted to
    /// subjects with an event.
    EventAware,
}

#[derive(Debug, Clone)]
pub struct MiOptions {
    pub m_imputations: usize,
    /// When set, run this many bootstrap imputations instead of
    /// `m_imputations`, each with its own parameter draw, and pool them the
    /// same way. Off by default: every imputation already draws its own
    /// stage-1 parameters.
    pub n_boot: Option<usize>,
    pub model: ImputationModel,
}

impl Default for MiOptions {
    fn default() -> Self {
        MiOptions {
            m_imputations: DEFAULT_IMPUTATIONS,
            n_boot: None,
            model: ImputationModel::default(),
        }
    }
}

/// Multiple imputation: the mixed model is augmented with `Λ̂(Tᵢ)` and the
/// last-visit indicator, each imputation draws parameters and then random
/// effects from their posterior, and the Cox fits are pooled by Rubin's
/// rule. `n_boot > 0` switches on the bootstrap layer described in
/// [`MiOptions`].
pub fn estimate_mi(
    c: &Cohort,
    spec: &LmmSpec,
    m_imputations: usize,
    n_boot: usize,
    stream: &RngStream,
) -> Result<EstimateResult, EstimatorError> {
    estimate_mi_with(
        c,
        spec,
        &MiOptions {
            m_imputations,
            n_boot: (n_boot > 0).then_some(n_boot),
            ..MiOptions::default()
        },
        stream,
    )
}

pub fn estimate_mi_with(
    c: &Cohort,
    spec: &LmmSpec,
    opts: &MiOptions,
    stream: &RngStream,
) -> Result<EstimateResult, EstimatorError> {
    let truncated;
    let c = if c.truncated_at_event() {
        c
    } else {
        truncated = truncate_at_event(c);
        &truncated
    };
    let m = opts.n_boot.unwrap_or(opts.m_imputations);
    if m < 2 {
        return Err(EstimatorError::Argument(format!(
            "need at least 2 imputations, got {m}"
        )));
    }
    let spec = spec.clone().with_regressor(
        "nelson_aalen",
        Regressor::NelsonAalen {
            estimate: nelson_aalen(c),
        },
    );
    let spec = match opts.model {
        ImputationModel::LastVisit => spec.with_regressor("last_visit", Regressor::LastVisit),
        ImputationModel::EventAware => spec
            .with_regressor("event_last_visit", Regressor::EventLastVisit)
            .with_regressor("event", Regressor::EventIndicator),
    };
    let stage1 = fit_lmm(c, &spec).map_err(lmm_err("mi stage 1"))?;

    let fits = par::map_range(m, |k| {
        let mut s = stream.derive(k as u64);
        let params = draw_parameters(&stage1, &mut s).map_err(lmm_err("mi draw"))?;
        let paths = c
            .subjects()
            .iter()
            .map(|subj| {
                let u = draw_random_effects(&params, subj, &spec, &mut s).map_err(lmm_err("mi draw"))?;
                predict_with(&params, subj, &spec, &u).map_err(lmm_err("mi draw"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        fit_cox(c, &paths, c.covariate_names()).map_err(cox_err("mi cox"))
    });
    let mut ok = Vec::with_capacity(m);
    let mut first_err = None;
    for f in fits {
        match f {
            Ok(fit) => ok.push(fit),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let failed = m - ok.len();
    if ok.len() < 2 {
        return Err(first_err.unwrap_or(EstimatorError::TooManyFailures { failed, total: m }));
    }
    if failed * 10 > m {
        return Err(EstimatorError::TooManyFailures { failed, total: m });
    }
    let est: Vec<f64> = ok.iter().map(|f| f.exposure_coef()).collect();
    let var: Vec<f64> = ok.iter().map(|f| f.exposure_var()).collect();
    let (gamma, total) = rubin_pool(&est, &var)?;
    let spread = est.iter().map(|e| (e - gamma).powi(2)).sum::<f64>() / (est.len() - 1) as f64;
    Ok(EstimateResult::new(Method::Mi, gamma, total.sqrt(), true)
        .with("imputations", ok.len() as f64)
        .with("failed_imputations", failed as f64)
        .with("mi_bootstrap", f64::from(u8::from(opts.n_boot.is_some())))
        .with(
            "event_aware",
            f64::from(u8::from(opts.model == ImputationModel::EventAware)),
        )
        .with("between_var", spread)
        .with("lmm_iterations", stage1.iterations as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rubin_hand_examples() {
        let (p, v) = rubin_pool(&[0.3, 0.3, 0.3], &[0.01, 0.01, 0.01]).unwrap();
        assert!((p - 0.3).abs() < 1e-15 && (v - 0.01).abs() < 1e-15);
        let (p, v) = rubin_pool(&[0.2, 0.4], &[0.01, 0.01]).unwrap();
        assert!((p - 0.3).abs() < 1e-15);
        assert!((v - 0.04).abs() < 1e-15);
        let (p2, v2) = rubin_pool(&[0.4, 0.2], &[0.01, 0.01]).unwrap();
        assert_eq!((p, v), (p2, v2));
        assert!(rubin_pool(&[0.1], &[0.01]).is_err());
        assert!(rubin_pool(&[0.1, 0.2], &[0.01, 0.0]).is_err());
    }
}
