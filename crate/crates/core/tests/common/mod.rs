//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use tvexp_core::data::{Cohort, ExposurePath, SubjectRecord, Visit};
use tvexp_core::lmm::LmmParams;

pub fn subject(id: &str, visits: &[(f64, f64)], t: f64, event: bool) -> SubjectRecord {
    SubjectRecord::new(
        id,
        visits.iter().map(|&(time, value)| Visit { time, value }).collect(),
        t,
        event,
    )
}

/// Breslow partial log-likelihood by explicit risk sets.
pub fn brute_cox(times: &[f64], events: &[bool], paths: &[ExposurePath], gamma: f64) -> f64 {
    let mut ll = 0.0;
    let mut done = vec![];
    for (i, &ti) in times.iter().enumerate() {
        if !events[i] || done.contains(&ti.to_bits()) {
            continue;
        }
        done.push(ti.to_bits());
        let failing: Vec<usize> = (0..times.len()).filter(|&j| events[j] && times[j] == ti).collect();
        let denom: f64 = (0..times.len())
            .filter(|&j| times[j] >= ti)
            .map(|j| (gamma * paths[j].value(ti)).exp())
            .sum();
        for j in &failing {
            ll += gamma * paths[*j].value(ti) - denom.ln();
        }
    }
    ll
}

/// One `(start, stop]` interval of a counting-process layout.
#[derive(Debug, Clone, Copy)]
pub struct Row {
    pub start: f64,
    pub stop: f64,
    pub x: f64,
    pub event: bool,
}

/// Splits each subject at its visits, carrying the last value forward.
/// The interval before the first visit uses the first value.
pub fn counting_process_rows(c: &Cohort) -> Vec<Row> {
    let mut rows = vec![];
    for s in c.subjects() {
        let mut start = 0.0;
        let mut x = s.visits[0].value;
        for v in &s.visits {
            if v.time >= s.event_time {
                break;
            }
            if v.time > start {
                rows.push(Row {
                    start,
                    stop: v.time,
                    x,
                    event: false,
                });
                start = v.time;
            }
            x = v.value;
        }
        rows.push(Row {
            start,
            stop: s.event_time,
            x,
            event: s.event,
        });
    }
    rows
}

/// Breslow log-likelihood, score and information over counting-process rows.
pub fn rows_cox(rows: &[Row], gamma: f64) -> (f64, f64, f64) {
    let mut times: Vec<f64> = rows.iter().filter(|r| r.event).map(|r| r.stop).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
    for t in times {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for r in rows.iter().filter(|r| r.start < t && t <= r.stop) {
            let w = (gamma * r.x).exp();
            s0 += w;
            s1 += w * r.x;
            s2 += w * r.x * r.x;
        }
        for r in rows.iter().filter(|r| r.event && r.stop == t) {
            ll += gamma * r.x - s0.ln();
            score += r.x - s1 / s0;
            info += s2 / s0 - (s1 / s0).powi(2);
        }
    }
    (ll, score, info)
}

/// Newton iterations on [`rows_cox`].
pub fn rows_cox_fit(rows: &[Row]) -> f64 {
    let mut g = 0.0;
    for _ in 0..100 {
        let (_, s, i) = rows_cox(rows, g);
        let step = s / i;
        g += step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    g
}

/// Log-determinant and solve by Gaussian elimination with partial pivoting.
pub fn gauss_logdet_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> (f64, Vec<f64>) {
    let n = b.len();
    let mut logdet = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        logdet += a[k][k].abs().ln();
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    (logdet, x)
}

/// Marginal Gaussian log-likelihood of a random intercept and slope model
/// from the dense covariance `Z B Zᵀ + σ² I`.
pub fn gls_loglik(c: &Cohort, p: &LmmParams) -> f64 {
    let b = &p.re_cov;
    c.subjects()
        .iter()
        .map(|s| {
            let n = s.visits.len();
            let z: Vec<[f64; 2]> = s.visits.iter().map(|v| [1.0, v.time]).collect();
            let mut v = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for a in 0..2 {
                        for d in 0..2 {
                            acc += z[i][a] * b[(a, d)] * z[j][d];
                        }
                    }
                    v[i][j] = acc + if i == j { p.sigma2 } else { 0.0 };
                }
            }
            let r: Vec<f64> = s
                .visits
                .iter()
                .map(|vis| vis.value - p.beta[0] - p.beta[1] * vis.time)
                .collect();
            let (logdet, x) = gauss_logdet_solve(v, r.clone());
            let quad: f64 = r.iter().zip(&x).map(|(a, b)| a * b).sum();
            -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
        })
        .sum()
}
