use serde::{Deserialize, Serialize};

use crate::data::Cohort;

/// Right-continuous, nondecreasing step function starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn zero() -> Self {
        StepFunction {
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    /// `times` strictly increasing; `values` nondecreasing and nonnegative.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(times.len(), values.len());
        debug_assert!(times.windows(2).all(|w| w[0] < w[1]));
        StepFunction { times, values }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Distinct event times with event counts and at-risk counts.
pub(crate) fn event_table(c: &Cohort) -> Vec<(f64, usize, usize)> {
    let mut exits: Vec<(f64, bool)> = c.subjects().iter().map(|s| (s.event_time, s.event)).collect();
    exits.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = exits.len();
    let mut table = Vec::new();
    let mut i = 0;
    while i < n {
        let t = exits[i].0;
        let mut j = i;
        let mut d = 0;
        while j < n && exits[j].0 == t {
            d += usize::from(exits[j].1);
            j += 1;
        }
        if d > 0 {
            table.push((t, d, n - i));
        }
        i = j;
    }
    table
}

/// Nelson-Aalen estimate of the cumulative hazard, `Σ_{t_k ≤ t} d_k / n_k`.
pub fn nelson_aalen(c: &Cohort) -> StepFunction {
    let mut acc = 0.0;
    let (times, values) = event_table(c)
        .into_iter()
        .map(|(t, d, n)| {
            acc += d as f64 / n as f64;
            (t, acc)
        })
        .unzip();
    StepFunction::new(times, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubjectRecord, Visit};

    fn cohort(rows: &[(f64, bool)]) -> Cohort {
        let subjects = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| SubjectRecord::new(format!("s{i}"), vec![Visit { time: 0.0, value: 0.0 }], t, e))
            .collect();
        Cohort::new(subjects, true, vec![]).unwrap()
    }

    #[test]
    fn hand_example() {
        let na = nelson_aalen(&cohort(&[(1.0, true), (2.0, true), (3.0, false)]));
        assert!((na.eval(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((na.eval(2.0) - 5.0 / 6.0).abs() < 1e-15);
        assert!((na.eval(3.0) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(na.eval(0.5), 0.0);
    }

    #[test]
    fn no_events_is_zero() {
        let na = nelson_aalen(&cohort(&[(1.0, false), (2.0, false)]));
        assert_eq!(na.eval(10.0), 0.0);
    }

    #[test]
    fn harmonic_partial_sum() {
        let n = 25;
        let rows: Vec<(f64, bool)> = (1..=n).map(|k| (k as f64, true)).collect();
        let na = nelson_aalen(&cohort(&rows));
        let expected: f64 = (1..=n).map(|k| 1.0 / (n - k + 1) as f64).sum();
        assert!((na.eval(n as f64) - expected).abs() < 1e-13);
    }

    #[test]
    fn order_invariance_and_censoring() {
        let a = nelson_aalen(&cohort(&[(1.0, true), (2.5, false), (2.0, true)]));
        let b = nelson_aalen(&cohort(&[(2.0, true), (1.0, true), (2.5, false)]));
        assert_eq!(a, b);
        // Censored before the first event: never in a risk set.
        let c = nelson_aalen(&cohort(&[(1.0, true), (2.5, false), (2.0, true), (0.5, false)]));
        assert_eq!(a, c);
        // Censored after the last event: same jump times, smaller jumps.
        let d = nelson_aalen(&cohort(&[(1.0, true), (2.5, false), (2.0, true), (9.0, false)]));
        assert_eq!(a.times(), d.times());
        assert!(d.eval(2.0) < a.eval(2.0));
    }
}
