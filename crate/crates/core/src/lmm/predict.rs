use super::design::{regressor_constants, SubjectDesign};
use super::fit::{subject_posterior, LmmFit, LmmParams, Precomputed};
use super::{LmmError, LmmSpec};
use crate::data::{ExposurePath, SubjectRecord, Trajectory};
use crate::numerics::{cholesky_psd, draw_normal, Matrix, RngStream};

const MAX_REDRAWS: usize = 100;

pub enum PredictMode<'a> {
    /// `(β̂, ζ̂, û)`.
    Mean,
    /// One joint draw of parameters and random effects.
    Draw(&'a mut RngStream),
}

/// Posterior mean and covariance of `uᵢ` given the subject's visits.
/// With no visits this is the prior `N(0, B)`.
pub fn posterior(params: &LmmParams, s: &SubjectRecord, spec: &LmmSpec) -> Result<(Vec<f64>, Matrix), LmmError> {
    let q = spec.random_basis.dimension();
    if !s.has_visits() {
        return Ok((vec![0.0; q], params.re_cov.clone()));
    }
    let pre = Precomputed::new(params)?;
    let d = SubjectDesign::new(spec, s)?;
    let post = subject_posterior(&d, &pre)?;
    let mut cov = post.c.inverse().scale(params.sigma2);
    cov.symmetrize();
    Ok((post.mean, cov))
}

/// Best linear unbiased predictor `B Zᵀ V⁻¹ (y − Xβ − Gζ)`.
pub fn blup(fit: &LmmFit, s: &SubjectRecord, spec: &LmmSpec) -> Result<Vec<f64>, LmmError> {
    Ok(posterior(&fit.params(), s, spec)?.0)
}

/// Draws `θ̃ ~ N(θ̂, param_cov)` on the unconstrained scale, retrying when a
/// draw maps to a non-finite or non-positive-definite configuration.
pub fn draw_parameters(fit: &LmmFit, stream: &mut RngStream) -> Result<LmmParams, LmmError> {
    let root = cholesky_psd(&fit.param_cov, 1e-12)?;
    let mut last_err = None;
    for _ in 0..MAX_REDRAWS {
        let theta = draw_normal(stream, &fit.theta, &root)?;
        if theta.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let p = fit.layout.unpack(&theta);
        match crate::numerics::cholesky(&p.re_cov) {
            Ok(_) if p.sigma2.is_finite() => return Ok(p),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    Err(match last_err {
        Some(e) => e.into(),
        None => LmmError::Spec("parameter draws were never finite".into()),
    })
}

/// Joint draw `(β̃, ζ̃, ũ)`: parameters from their asymptotic normal, then
/// the random effects from their posterior at the drawn parameters.
pub fn posterior_draw(
    fit: &LmmFit,
    s: &SubjectRecord,
    spec: &LmmSpec,
    stream: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), LmmError> {
    let p = draw_parameters(fit, stream)?;
    let u = draw_random_effects(&p, s, spec, stream)?;
    Ok((p.beta, p.zeta, u))
}

pub(crate) fn draw_random_effects(
    p: &LmmParams,
    s: &SubjectRecord,
    spec: &LmmSpec,
    stream: &mut RngStream,
) -> Result<Vec<f64>, LmmError> {
    let (mean, cov) = posterior(p, s, spec)?;
    let root = cholesky_psd(&cov, 1e-14)?;
    Ok(draw_normal(stream, &mean, &root)?)
}

/// `F(t)ᵀβ + Z(t)ᵀu + G(t)ᵀζ` as a path over `[0, max(Tᵢ, last visit)]`.
pub fn predict_with(
    params: &LmmParams,
    s: &SubjectRecord,
    spec: &LmmSpec,
    u: &[f64],
) -> Result<ExposurePath, LmmError> {
    let constants = regressor_constants(spec, s)?;
    let mut offset = 0.0;
    let mut jump = None;
    for (k, (_, r)) in spec.extra_regressors.iter().enumerate() {
        match r.last_visit_flag(s) {
            Some(on) => {
                if let (true, Some(t)) = (on, s.last_visit_time()) {
                    let size = jump.map_or(0.0, |(_, z): (f64, f64)| z) + params.zeta[k];
                    jump = Some((t, size));
                }
            }
            None => offset += params.zeta[k] * constants[k],
        }
    }
    let horizon = s.event_time.max(s.last_visit_time().unwrap_or(0.0));
    Ok(ExposurePath::trajectory(
        Trajectory {
            fixed_basis: spec.fixed_basis.clone(),
            fixed_coef: params.beta.clone(),
            random_basis: spec.random_basis.clone(),
            random_coef: u.to_vec(),
            offset,
            jump,
        },
        horizon,
    ))
}

pub fn predict_exposure(
    fit: &LmmFit,
    s: &SubjectRecord,
    spec: &LmmSpec,
    mode: PredictMode<'_>,
) -> Result<ExposurePath, LmmError> {
    match mode {
        PredictMode::Mean => {
            let p = fit.params();
            let u = posterior(&p, s, spec)?.0;
            predict_with(&p, s, spec, &u)
        }
        PredictMode::Draw(stream) => {
            let p = draw_parameters(fit, stream)?;
            let u = draw_random_effects(&p, s, spec, stream)?;
            predict_with(&p, s, spec, &u)
        }
    }
}
