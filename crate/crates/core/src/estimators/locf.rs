use super::{cox_err, EstimateResult, EstimatorError, Method};
use crate::data::{truncate_at_event, Cohort, ExposurePath};
use crate::survival::fit_cox;

/// Step paths holding each observed value until the next visit.
pub fn locf_paths(c: &Cohort) -> Result<Vec<ExposurePath>, EstimatorError> {
    c.subjects()
        .iter()
        .map(|s| {
            if s.visits.is_empty() {
                return Err(EstimatorError::Argument(format!(
                    "subject {} has no visit to carry forward",
                    s.id
                )));
            }
            Ok(ExposurePath::step(
                s.visits.iter().map(|v| v.time).collect(),
                s.visits.iter().map(|v| v.value).collect(),
                s.event_time,
            ))
        })
        .collect()
}

/// Cox model on last-observation-carried-forward exposure. The standard
/// error is model-based: the method has no first stage to propagate.
pub fn estimate_locf(c: &Cohort) -> Result<EstimateResult, EstimatorError> {
    let truncated;
    let c = if c.truncated_at_event() {
        c
    } else {
        truncated = truncate_at_event(c);
        &truncated
    };
    let paths = locf_paths(c)?;
    let fit = fit_cox(c, &paths, c.covariate_names()).map_err(cox_err("locf cox"))?;
    Ok(
        EstimateResult::new(Method::Locf, fit.exposure_coef(), fit.exposure_var().sqrt(), true)
            .with("cox_iterations", fit.iterations as f64)
            .with("n_events", fit.n_events as f64),
    )
}
