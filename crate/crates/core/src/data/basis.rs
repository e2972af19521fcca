use serde::{Deserialize, Serialize};

use super::DataError;

/// Vector of time functions `F(t)`, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeBasis {
    Polynomial {
        degree: usize,
    },
    /// Natural cubic spline in the truncated-power parameterization: linear
    /// outside the boundary knots.
    NaturalCubicSpline {
        interior: Vec<f64>,
        boundary: (f64, f64),
    },
}

impl TimeBasis {
    pub fn polynomial(degree: usize) -> Self {
        TimeBasis::Polynomial { degree }
    }

    pub fn natural_spline(interior: Vec<f64>, boundary: (f64, f64)) -> Result<Self, DataError> {
        let (lo, hi) = boundary;
        if !(lo < hi) {
            return Err(DataError::Basis(format!("boundary knots ({lo}, {hi}) not increasing")));
        }
        if interior.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(DataError::Basis("interior knots must be strictly increasing".into()));
        }
        if interior.iter().any(|&k| !(k > lo && k < hi)) {
            return Err(DataError::Basis(
                "boundary knots must strictly bracket interior knots".into(),
            ));
        }
        Ok(TimeBasis::NaturalCubicSpline { interior, boundary })
    }

    /// Interior knots at equally spaced quantiles of `times`, boundary knots
    /// at their range.
    pub fn natural_spline_from_times(times: &[f64], n_interior: usize) -> Result<Self, DataError> {
        let mut sorted: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
        if sorted.len() < 2 {
            return Err(DataError::Basis("need at least two visit times to place knots".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let mut interior = Vec::with_capacity(n_interior);
        for k in 1..=n_interior {
            let q = k as f64 / (n_interior + 1) as f64;
            let pos = q * (sorted.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            let v = if i + 1 < sorted.len() {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[i]
            };
            if v > lo && v < hi && interior.last().is_none_or(|&p| v > p) {
                interior.push(v);
            }
        }
        TimeBasis::natural_spline(interior, (lo, hi))
    }

    pub fn dimension(&self) -> usize {
        match self {
            TimeBasis::Polynomial { degree } => degree + 1,
            TimeBasis::NaturalCubicSpline { interior, .. } => interior.len() + 2,
        }
    }

    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        self.evaluate_into(t, &mut out);
        out
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dimension());
        match self {
            TimeBasis::Polynomial { degree } => {
                let mut p = 1.0;
                for slot in out.iter_mut().take(degree + 1) {
                    *slot = p;
                    p *= t;
                }
            }
            TimeBasis::NaturalCubicSpline { interior, boundary } => {
                out[0] = 1.0;
                out[1] = t;
                if interior.is_empty() {
                    return;
                }
                let last = boundary.1;
                let second_last = *interior.last().expect("non-empty");
                let d = |knot: f64| (cube_plus(t - knot) - cube_plus(t - last)) / (last - knot);
                let d_ref = d(second_last);
                // Knots ξ_1 .. ξ_K with ξ_1 the lower boundary.
                out[2] = d(boundary.0) - d_ref;
                for (j, &knot) in interior.iter().take(interior.len() - 1).enumerate() {
                    out[3 + j] = d(knot) - d_ref;
                }
            }
        }
    }

    /// `F(t)ᵀ coef` without allocating.
    #[inline]
    pub fn dot(&self, t: f64, coef: &[f64]) -> f64 {
        match self {
            TimeBasis::Polynomial { .. } => {
                // Horner
                coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            TimeBasis::NaturalCubicSpline { .. } => {
                let mut buf = [0.0; 32];
                let n = self.dimension();
                if n <= buf.len() {
                    self.evaluate_into(t, &mut buf[..n]);
                    buf[..n].iter().zip(coef).map(|(a, b)| a * b).sum()
                } else {
                    self.evaluate(t).iter().zip(coef).map(|(a, b)| a * b).sum()
                }
            }
        }
    }
}

#[inline]
fn cube_plus(x: f64) -> f64 {
    if x > 0.0 {
        x * x * x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_values() {
        assert_eq!(TimeBasis::polynomial(1).evaluate(2.0), vec![1.0, 2.0]);
        assert_eq!(TimeBasis::polynomial(2).evaluate(0.0), vec![1.0, 0.0, 0.0]);
        assert_eq!(TimeBasis::polynomial(2).dot(3.0, &[1.0, 2.0, 0.5]), 1.0 + 6.0 + 4.5);
    }

    #[test]
    fn spline_dimension_and_intercept() {
        let b = TimeBasis::natural_spline(vec![2.0, 5.0], (0.0, 10.0)).unwrap();
        assert_eq!(b.dimension(), 4);
        for t in [0.0, 1.3, 7.7, 12.0] {
            assert_eq!(b.evaluate(t)[0], 1.0);
        }
    }

    #[test]
    fn spline_second_derivative_vanishes_beyond_boundary() {
        let b = TimeBasis::natural_spline(vec![2.0, 4.0, 7.0], (0.0, 10.0)).unwrap();
        let h = 1e-3;
        for t in [-3.0, -0.5, 0.0, 10.0, 10.5, 14.0] {
            let (lo, mid, hi) = (b.evaluate(t - h), b.evaluate(t), b.evaluate(t + h));
            for k in 0..b.dimension() {
                let second = (hi[k] - 2.0 * mid[k] + lo[k]) / (h * h);
                // At the knots themselves the one-sided curvature is zero on
                // the outside; central differences see half a kink at most.
                let tol = if t == 0.0 || t == 10.0 { 1e-2 } else { 1e-6 };
                assert!(second.abs() < tol, "t={t} k={k} second={second}");
            }
        }
    }

    #[test]
    fn spline_is_continuous() {
        let b = TimeBasis::natural_spline(vec![3.0], (0.0, 9.0)).unwrap();
        for knot in [0.0, 3.0, 9.0] {
            let a = b.evaluate(knot - 1e-9);
            let c = b.evaluate(knot + 1e-9);
            for (x, y) in a.iter().zip(&c) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn knots_at_quantiles() {
        let times: Vec<f64> = (0..=10).map(f64::from).collect();
        let b = TimeBasis::natural_spline_from_times(&times, 1).unwrap();
        match b {
            TimeBasis::NaturalCubicSpline { interior, boundary } => {
                assert_eq!(interior, vec![5.0]);
                assert_eq!(boundary, (0.0, 10.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn bad_knots_rejected() {
        assert!(TimeBasis::natural_spline(vec![0.0], (0.0, 1.0)).is_err());
        assert!(TimeBasis::natural_spline(vec![], (1.0, 1.0)).is_err());
    }
}
