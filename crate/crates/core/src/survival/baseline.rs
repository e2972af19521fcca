use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::SurvivalError;
use crate::data::{ExposurePath, PathShape};
use crate::numerics::UnitRule;

/// Parametric baseline hazard `λ₀(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParametricBaseline {
    Exponential {
        rate: f64,
    },
    /// `λ₀(t) = (k/λ)(t/λ)^{k-1}`, cumulative `(t/λ)^k`.
    Weibull {
        shape: f64,
        scale: f64,
    },
    /// Rate `rates[m]` on `[cuts[m-1], cuts[m])`, with `cuts[-1] = 0` and the
    /// last rate extending to infinity. `rates.len() == cuts.len() + 1`.
    PiecewiseConstant {
        cuts: Vec<f64>,
        rates: Vec<f64>,
    },
}

impl ParametricBaseline {
    pub fn validate(&self) -> Result<(), SurvivalError> {
        let ok = match self {
            ParametricBaseline::Exponential { rate } => *rate > 0.0,
            ParametricBaseline::Weibull { shape, scale } => *shape > 0.0 && *scale > 0.0,
            ParametricBaseline::PiecewiseConstant { cuts, rates } => {
                rates.len() == cuts.len() + 1
                    && rates.iter().all(|r| *r > 0.0)
                    && cuts.iter().all(|c| *c > 0.0)
                    && cuts.windows(2).all(|w| w[0] < w[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SurvivalError::Baseline(format!("{self:?}")))
        }
    }

    pub fn hazard(&self, t: f64) -> f64 {
        match self {
            ParametricBaseline::Exponential { rate } => *rate,
            ParametricBaseline::Weibull { shape, scale } => shape / scale * (t / scale).powf(shape - 1.0),
            ParametricBaseline::PiecewiseConstant { cuts, rates } => rates[cuts.partition_point(|&c| c <= t)],
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            ParametricBaseline::Exponential { rate } => rate * t,
            ParametricBaseline::Weibull { shape, scale } => (t / scale).powf(*shape),
            ParametricBaseline::PiecewiseConstant { cuts, rates } => {
                let mut acc = 0.0;
                let mut lo = 0.0;
                for (m, &rate) in rates.iter().enumerate() {
                    let hi = cuts.get(m).copied().unwrap_or(f64::INFINITY);
                    if t <= lo {
                        break;
                    }
                    acc += rate * (t.min(hi) - lo);
                    lo = hi;
                }
                acc
            }
        }
    }

    /// Breakpoints of the hazard inside `(a, b)`.
    fn breaks_within(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            ParametricBaseline::PiecewiseConstant { cuts, .. } => {
                cuts.iter().copied().filter(|&c| c > a && c < b).collect()
            }
            _ => Vec::new(),
        }
    }

    /// `∫_a^b λ₀(s) m(s) ds` for a smooth multiplier `m`.
    fn integrate_smooth<F: Fn(f64) -> f64>(&self, m: &F, a: f64, b: f64, rule: &UnitRule) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut edges = vec![a];
        edges.extend(self.breaks_within(a, b));
        edges.push(b);
        let mut total = 0.0;
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            total += match self {
                ParametricBaseline::Weibull { .. } if lo == 0.0 => {
                    // s = hi·x² removes the t^{k-1} singularity at the origin.
                    rule.nodes
                        .iter()
                        .zip(&rule.weights)
                        .map(|(&x, &wt)| {
                            let s = hi * x * x;
                            wt * 2.0 * hi * x * self.hazard(s) * m(s)
                        })
                        .sum::<f64>()
                }
                _ => rule.integrate(lo, hi, |s| self.hazard(s) * m(s)),
            };
        }
        total
    }
}

pub(crate) const DEFAULT_LEGENDRE_NODES: usize = 24;

fn default_rule() -> &'static UnitRule {
    static RULE: OnceLock<UnitRule> = OnceLock::new();
    RULE.get_or_init(|| UnitRule::legendre(DEFAULT_LEGENDRE_NODES).expect("valid order"))
}

/// `∫₀ᵗ λ₀(s) exp(γ · path(s)) ds`.
///
/// Closed form when `γ = 0`, for constant paths and for step paths; smooth
/// paths use Gauss-Legendre on each smooth piece.
pub fn cumulative_hazard(b: &ParametricBaseline, path: &ExposurePath, gamma: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if gamma == 0.0 {
        return b.cumulative(t);
    }
    match path.shape() {
        PathShape::Constant(v) => (gamma * v).exp() * b.cumulative(t),
        PathShape::Step { times, values } => {
            let mut acc = 0.0;
            let mut lo = 0.0;
            for (j, &v) in values.iter().enumerate() {
                let hi = times.get(j + 1).copied().unwrap_or(f64::INFINITY).min(t);
                if hi > lo {
                    acc += (gamma * v).exp() * (b.cumulative(hi) - b.cumulative(lo));
                    lo = hi;
                }
                if lo >= t {
                    break;
                }
            }
            acc
        }
        PathShape::Trajectory(tr) => {
            let m = |s: f64| (gamma * tr.value(s)).exp();
            match tr.jump {
                Some((at, _)) if at > 0.0 && at < t => {
                    b.integrate_smooth(&m, 0.0, at, default_rule()) + b.integrate_smooth(&m, at, t, default_rule())
                }
                _ => b.integrate_smooth(&m, 0.0, t, default_rule()),
            }
        }
        PathShape::Function(f) => {
            let m = |s: f64| (gamma * f(s)).exp();
            b.integrate_smooth(&m, 0.0, t, default_rule())
        }
    }
}
