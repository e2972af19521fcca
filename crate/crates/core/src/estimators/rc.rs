use serde::{Deserialize, Serialize};

use super::{cox_err, lmm_err, EstimateResult, EstimatorError, Method};
use crate::data::{truncate_at_event, Cohort, ExposurePath};
use crate::lmm::{draw_parameters, fit_lmm, posterior, predict_with, LmmFit, LmmParams, LmmSpec};
use crate::numerics::RngStream;
use crate::par;
use crate::survival::{fit_cox_data, CoxData, CoxFit, CoxOptions};

/// Mean-mode predicted paths `F(t)ᵀβ + Z(t)ᵀû + G(t)ᵀζ` at `params`.
pub fn rc_paths(c: &Cohort, spec: &LmmSpec, params: &LmmParams) -> Result<Vec<ExposurePath>, EstimatorError> {
    c.subjects()
        .iter()
        .map(|s| {
            let u = posterior(params, s, spec).map_err(lmm_err("rc prediction"))?.0;
            predict_with(params, s, spec, &u).map_err(lmm_err("rc prediction"))
        })
        .collect()
}

fn stage2(c: &Cohort, spec: &LmmSpec, params: &LmmParams, start: Option<Vec<f64>>) -> Result<CoxFit, EstimatorError> {
    let paths = rc_paths(c, spec, params)?;
    let data = CoxData::new(c, &paths, c.covariate_names()).map_err(cox_err("rc cox"))?;
    fit_cox_data(
        &data,
        &CoxOptions {
            start,
            ..CoxOptions::default()
        },
    )
    .map_err(cox_err("rc cox"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// `mean(within) + (1 + 1/B) · between`.
    pub variance: f64,
    pub mean_within: f64,
    pub between: f64,
    pub n_used: usize,
    pub n_failed: usize,
}

/// Parametric bootstrap of a two-stage fit: draw stage-1 parameters from
/// their asymptotic normal, rerun stage 2, and combine the model-based
/// variances with the spread of the refitted coefficients. Draw `b` uses
/// `stream.derive(b)`.
pub fn bootstrap_variance<P>(
    pipeline: P,
    stage1: &LmmFit,
    n_boot: usize,
    stream: &RngStream,
) -> Result<BootstrapSummary, EstimatorError>
where
    P: Fn(&LmmParams) -> Result<CoxFit, EstimatorError> + Sync + Send,
{
    if n_boot < 2 {
        return Err(EstimatorError::Argument(format!(
            "n_boot must be at least 2, got {n_boot}"
        )));
    }
    let draws = par::map_range(n_boot, |b| {
        let mut s = stream.derive(b as u64);
        let p = draw_parameters(stage1, &mut s).map_err(lmm_err("bootstrap draw"))?;
        pipeline(&p)
    });
    let ok: Vec<(f64, f64)> = draws
        .iter()
        .filter_map(|d| d.as_ref().ok())
        .map(|f| (f.exposure_coef(), f.exposure_var()))
        .collect();
    let n_failed = n_boot - ok.len();
    if n_failed * 10 > n_boot || ok.len() < 2 {
        return Err(EstimatorError::TooManyFailures {
            failed: n_failed,
            total: n_boot,
        });
    }
    let b = ok.len() as f64;
    let mean_within = ok.iter().map(|(_, v)| v).sum::<f64>() / b;
    let mean_gamma = ok.iter().map(|(g, _)| g).sum::<f64>() / b;
    let between = ok.iter().map(|(g, _)| (g - mean_gamma).powi(2)).sum::<f64>() / (b - 1.0);
    Ok(BootstrapSummary {
        variance: mean_within + (1.0 + 1.0 / b) * between,
        mean_within,
        between,
        n_used: ok.len(),
        n_failed,
    })
}

/// Two-stage regression calibration. With `post_event` the mixed model is
/// fitted on every visit in `c`, including those after the event, so `c`
/// must not be truncated. Otherwise `c` is truncated first if needed.
/// `n_boot = 0` skips the bootstrap and reports the naive Cox SE.
pub fn estimate_rc(
    c: &Cohort,
    spec: &LmmSpec,
    post_event: bool,
    n_boot: usize,
    stream: &RngStream,
) -> Result<EstimateResult, EstimatorError> {
    let method = if post_event { Method::PeRc } else { Method::Rc };
    let truncated;
    let c = if post_event {
        if c.truncated_at_event() {
            return Err(EstimatorError::Argument(
                "post-event calibration needs visits after the event; cohort is truncated".into(),
            ));
        }
        c
    } else if c.truncated_at_event() {
        c
    } else {
        truncated = truncate_at_event(c);
        &truncated
    };
    let stage1 = fit_lmm(c, spec).map_err(lmm_err("rc stage 1"))?;
    let params = stage1.params();
    let fit = stage2(c, spec, &params, None)?;
    let gamma = fit.exposure_coef();
    let mut res = if n_boot == 0 {
        EstimateResult::new(method, gamma, fit.exposure_var().sqrt(), true).with("n_boot", 0.0)
    } else {
        let start = Some(fit.gamma.clone());
        let boot = bootstrap_variance(|p| stage2(c, spec, p, start.clone()), &stage1, n_boot, stream)?;
        EstimateResult::new(method, gamma, boot.variance.sqrt(), true)
            .with("n_boot", n_boot as f64)
            .with("boot_used", boot.n_used as f64)
            .with("boot_failed", boot.n_failed as f64)
            .with("boot_between_var", boot.between)
    };
    res = res
        .with("se_naive", fit.exposure_var().sqrt())
        .with("lmm_iterations", stage1.iterations as f64)
        .with("sigma2", stage1.sigma2);
    Ok(res)
}
