use serde::{Deserialize, Serialize};

use super::StudyError;
use crate::estimators::EstimateResult;

/// Performance of one method over the usable replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    /// Bias in percent of the truth; undefined when the truth is 0.
    pub rel_bias_pct: Option<f64>,
    /// Sample standard deviation of the estimates (divisor `n − 1`).
    pub emp_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// `mean((γ̂ − γ)²)`.
    pub mse: f64,
    /// Monte Carlo standard error of the bias, `emp_sd / √n`.
    pub mc_se: f64,
}

pub fn compute_metrics(estimates: &[EstimateResult], gamma_true: f64) -> Result<Metrics, StudyError> {
    let n = estimates.len();
    if n < 2 {
        return Err(StudyError::InsufficientData {
            method: estimates.first().map_or_else(|| "?".into(), |e| e.method.to_string()),
            n,
        });
    }
    let nf = n as f64;
    let mean = estimates.iter().map(|e| e.gamma_hat).sum::<f64>() / nf;
    let bias = mean - gamma_true;
    let var = estimates.iter().map(|e| (e.gamma_hat - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let mse = estimates
        .iter()
        .map(|e| (e.gamma_hat - gamma_true).powi(2))
        .sum::<f64>()
        / nf;
    let covered = estimates.iter().filter(|e| e.covers(gamma_true)).count();
    Ok(Metrics {
        n,
        mean,
        bias,
        rel_bias_pct: (gamma_true != 0.0).then(|| 100.0 * bias / gamma_true),
        emp_sd: var.sqrt(),
        mean_se: estimates.iter().map(|e| e.se_total).sum::<f64>() / nf,
        coverage: covered as f64 / nf,
        mse,
        mc_se: (var / nf).sqrt(),
    })
}
