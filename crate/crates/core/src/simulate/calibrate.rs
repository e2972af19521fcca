use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::data::ExposurePath;
use crate::numerics::{cholesky_psd, hermite_grid, Matrix};
use crate::survival::{cumulative_hazard, ParametricBaseline};

pub const WEIBULL_SHAPE: f64 = 1.5;

const CALIBRATION_NODES: usize = 20;

/// Event proportions targeted by the high, medium and low survival presets.
pub const EVENT_PROPORTIONS: [f64; 3] = [0.20, 0.40, 0.65];

/// `E_u[1 − exp(−Λ(horizon | u))]` for polynomial trajectories
/// `X(t) = Σ_k (fixed_k + u_k) t^k`, `u ~ N(0, re_cov)`, by tensor
/// Gauss-Hermite quadrature.
pub fn expected_event_proportion(
    baseline: &ParametricBaseline,
    fixed: &[f64],
    re_cov: &Matrix,
    gamma: f64,
    horizon: f64,
) -> f64 {
    let dim = fixed.len();
    let root = cholesky_psd(re_cov, 1e-14).expect("re_cov is positive semi-definite");
    let grid = hermite_grid(CALIBRATION_NODES, dim).expect("valid order");
    let norm = PI.powf(-(dim as f64) / 2.0);
    grid.iter()
        .map(|(x, w, _)| {
            let mut coef = fixed.to_vec();
            for i in 0..dim {
                for k in 0..=i {
                    coef[i] += std::f64::consts::SQRT_2 * root[(i, k)] * x[k];
                }
            }
            let path = ExposurePath::polynomial(coef, horizon);
            w * norm * (1.0 - (-cumulative_hazard(baseline, &path, gamma, horizon)).exp())
        })
        .sum()
}

/// Weibull scale (with shape [`WEIBULL_SHAPE`]) giving the target expected
/// event proportion by `horizon`, found by bisection on the log scale.
pub fn calibrate_weibull_scale(target: f64, fixed: &[f64], re_cov: &Matrix, gamma: f64, horizon: f64) -> f64 {
    let prop = |log_scale: f64| {
        expected_event_proportion(
            &ParametricBaseline::Weibull {
                shape: WEIBULL_SHAPE,
                scale: log_scale.exp(),
            },
            fixed,
            re_cov,
            gamma,
            horizon,
        )
    };
    // Proportion decreases in the scale.
    let (mut lo, mut hi) = ((horizon * 1e-3).ln(), (horizon * 1e4).ln());
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if prop(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Calibrated scales for the high, medium and low survival presets, under
/// the weaker association and the main linear design. Computed once.
pub fn main_weibull_scales() -> [f64; 3] {
    static SCALES: OnceLock<[f64; 3]> = OnceLock::new();
    *SCALES.get_or_init(|| {
        let fixed = [0.0, 1.0];
        let re_cov = Matrix::from_diag(&[1.0, 0.5]);
        EVENT_PROPORTIONS.map(|p| calibrate_weibull_scale(p, &fixed, &re_cov, 0.2, 10.0))
    })
}
