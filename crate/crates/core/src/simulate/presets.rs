use super::calibrate::main_weibull_scales;
use super::{ScenarioConfig, SimulateError, TrajectoryKind};
use crate::numerics::Matrix;
use crate::survival::ParametricBaseline;

pub const MAIN_SCENARIOS: std::ops::RangeInclusive<usize> = 1..=12;

const SLOPE_VARIANCE: f64 = 0.5;

/// Main scenario `n` in 1..=12, numbered
/// `6·[strong association] + 3·[large error] + survival level`, survival
/// level 1 = high, 2 = medium, 3 = low. Scenario 12 is the hardest.
pub fn main_scenario(n: usize) -> Result<ScenarioConfig, SimulateError> {
    if !MAIN_SCENARIOS.contains(&n) {
        return Err(SimulateError::UnknownLabel(n.to_string()));
    }
    let k = n - 1;
    let strong = k / 6 == 1;
    let large_error = (k / 3) % 2 == 1;
    let survival = k % 3;
    Ok(ScenarioConfig {
        label: n.to_string(),
        n_subjects: 500,
        gamma_true: if strong { 0.4 } else { 0.2 },
        trajectory: TrajectoryKind::Linear,
        re_cov: Matrix::from_diag(&[1.0, SLOPE_VARIANCE]),
        fixed_effects: vec![0.0, 1.0],
        error_sd: if large_error { 3.0 } else { 1.0 },
        baseline: ParametricBaseline::Weibull {
            shape: super::WEIBULL_SHAPE,
            scale: main_weibull_scales()[survival],
        },
        visit_spacing: 2.0,
        horizon: 10.0,
        missing_rate: 0.0,
        seed: 20_240_000 + n as u64,
    })
}

/// Looks up a scenario by label: `"1"`..`"12"` for the main grid,
/// `quadratic-<n>`, `correlated-<n>` and `missing-<n>` for the extension
/// families built on main scenario `n`, and `null` for the zero-association
/// case with an exponential baseline.
pub fn preset(label: &str) -> Result<ScenarioConfig, SimulateError> {
    let unknown = || SimulateError::UnknownLabel(label.to_string());
    if label == "null" {
        let mut cfg = main_scenario(1)?;
        cfg.label = label.to_string();
        cfg.gamma_true = 0.0;
        cfg.baseline = ParametricBaseline::Exponential {
            rate: -(0.6f64.ln()) / 10.0,
        };
        cfg.seed = 20_240_100;
        return Ok(cfg);
    }
    let (family, n) = match label.split_once('-') {
        Some((f, n)) => (f, n),
        None => ("main", label),
    };
    let n: usize = n.parse().map_err(|_| unknown())?;
    let mut cfg = main_scenario(n).map_err(|_| unknown())?;
    cfg.label = label.to_string();
    match family {
        "main" => {}
        "quadratic" => {
            cfg.trajectory = TrajectoryKind::Quadratic;
            cfg.fixed_effects = vec![0.0, 1.0, -0.05];
            cfg.re_cov = Matrix::from_diag(&[1.0, SLOPE_VARIANCE, 0.0025]);
            cfg.seed += 1000;
        }
        "correlated" => {
            let c = 0.5 * SLOPE_VARIANCE.sqrt();
            cfg.re_cov = Matrix::from_rows(&[[1.0, c], [c, SLOPE_VARIANCE]]);
            cfg.seed += 2000;
        }
        "missing" => {
            cfg.missing_rate = 0.10;
            cfg.seed += 3000;
        }
        _ => return Err(unknown()),
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbering() {
        let s12 = main_scenario(12).unwrap();
        assert_eq!(s12.gamma_true, 0.4);
        assert_eq!(s12.error_sd, 3.0);
        let s1 = main_scenario(1).unwrap();
        assert_eq!(s1.gamma_true, 0.2);
        assert_eq!(s1.error_sd, 1.0);
        for n in MAIN_SCENARIOS {
            main_scenario(n).unwrap().validate().unwrap();
        }
        assert!(main_scenario(13).is_err());
    }

    #[test]
    fn labels() {
        for l in ["null", "quadratic-3", "correlated-10", "missing-12", "7"] {
            let cfg = preset(l).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.label, l);
        }
        assert_eq!(preset("missing-4").unwrap().missing_rate, 0.10);
        for bad in ["", "13", "cubic-1", "missing-x"] {
            assert!(matches!(preset(bad), Err(SimulateError::UnknownLabel(_))));
        }
    }

    #[test]
    fn error_variance_ratios() {
        for n in MAIN_SCENARIOS {
            let cfg = main_scenario(n).unwrap();
            let err_var = cfg.error_sd * cfg.error_sd;
            if cfg.error_sd == 1.0 {
                assert_eq!(err_var / cfg.exposure_variance(0.0), 1.0);
                assert_eq!(err_var / cfg.exposure_variance(4.0), 1.0 / 9.0);
            } else {
                assert_eq!(err_var / cfg.exposure_variance(0.0), 9.0);
                assert_eq!(err_var / cfg.exposure_variance(4.0), 1.0);
            }
        }
    }
}
