//! Cox partial likelihood with functionally evaluated time-varying
//! exposure. Each subject's path is evaluated only at the distinct event
//! times at which that subject is at risk. Ties use Breslow's approximation.

use serde::{Deserialize, Serialize};

use super::step::StepFunction;
use super::SurvivalError;
use crate::data::{Cohort, ExposurePath};
use crate::numerics::{invert_information, Cholesky, Matrix};
use crate::par;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoxFit {
    /// Exposure coefficient first, then fixed covariates in the order given.
    pub gamma: Vec<f64>,
    /// Model-based standard errors. Not valid for two-stage pipelines, which
    /// ignore first-stage uncertainty.
    pub se_naive: Vec<f64>,
    pub cov: Matrix,
    pub loglik: f64,
    pub loglik_null: f64,
    pub n_events: usize,
    pub iterations: usize,
}

impl CoxFit {
    pub fn exposure_coef(&self) -> f64 {
        self.gamma[0]
    }

    pub fn exposure_var(&self) -> f64 {
        self.cov[(0, 0)]
    }
}

#[derive(Debug, Clone)]
pub struct CoxOptions {
    pub max_iterations: usize,
    pub start: Option<Vec<f64>>,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            max_iterations: 60,
            start: None,
        }
    }
}

struct EventBlock {
    time: f64,
    /// Offset into the exit-time ordering where the risk set begins.
    first_at_risk: usize,
    /// Positions (in exit order) of subjects failing at `time`.
    failures: Vec<usize>,
    /// Exposure value of every at-risk subject, in exit order.
    exposure: Vec<f64>,
}

/// Risk-set structure with exposure values materialized at event times.
pub struct CoxData {
    blocks: Vec<EventBlock>,
    /// Fixed covariates in exit order, row-major `n × (p-1)`.
    fixed: Vec<f64>,
    n_fixed: usize,
    n_events: usize,
}

impl CoxData {
    pub fn new(c: &Cohort, paths: &[ExposurePath], fixed_covariates: &[String]) -> Result<Self, SurvivalError> {
        let subjects = c.subjects();
        if paths.len() != subjects.len() {
            return Err(SurvivalError::Input(format!(
                "{} paths for {} subjects",
                paths.len(),
                subjects.len()
            )));
        }
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.sort_by(|&a, &b| subjects[a].event_time.total_cmp(&subjects[b].event_time));
        let n_fixed = fixed_covariates.len();
        let mut fixed = Vec::with_capacity(order.len() * n_fixed);
        for &i in &order {
            for name in fixed_covariates {
                fixed.push(
                    subjects[i]
                        .covariate(name)
                        .map_err(|e| SurvivalError::Input(e.to_string()))?,
                );
            }
        }

        let mut starts = Vec::new();
        let mut pos = 0;
        while pos < order.len() {
            let t = subjects[order[pos]].event_time;
            let mut end = pos;
            let mut failures = Vec::new();
            while end < order.len() && subjects[order[end]].event_time == t {
                if subjects[order[end]].event {
                    failures.push(end);
                }
                end += 1;
            }
            if !failures.is_empty() {
                starts.push((t, pos, failures));
            }
            pos = end;
        }
        if starts.is_empty() {
            return Err(SurvivalError::NoEvents);
        }
        let n_events = starts.iter().map(|(_, _, f)| f.len()).sum();
        let blocks = par::map_collect(&starts, |(t, first, failures)| EventBlock {
            time: *t,
            first_at_risk: *first,
            failures: failures.clone(),
            exposure: order[*first..].iter().map(|&i| paths[i].value(*t)).collect(),
        });
        for b in &blocks {
            if let Some(v) = b.exposure.iter().find(|v| !v.is_finite()) {
                return Err(SurvivalError::Input(format!(
                    "exposure path returned {v} at event time {}",
                    b.time
                )));
            }
        }
        Ok(CoxData {
            blocks,
            fixed,
            n_fixed,
            n_events,
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.n_fixed
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.time).collect()
    }

    #[inline]
    fn covariates(&self, block: &EventBlock, k: usize, out: &mut [f64]) {
        out[0] = block.exposure[k];
        let row = block.first_at_risk + k;
        out[1..].copy_from_slice(&self.fixed[row * self.n_fixed..(row + 1) * self.n_fixed]);
    }

    /// Log partial likelihood, score and observed information at `beta`.
    pub fn evaluate(&self, beta: &[f64]) -> (f64, Vec<f64>, Matrix) {
        let p = self.dim();
        let parts = par::map_collect(&self.blocks, |block| self.block_terms(block, beta));
        let mut ll = 0.0;
        let mut score = vec![0.0; p];
        let mut info = Matrix::zeros(p, p);
        for (l, u, i) in parts {
            ll += l;
            for a in 0..p {
                score[a] += u[a];
                for b in 0..p {
                    info[(a, b)] += i[a * p + b];
                }
            }
        }
        (ll, score, info)
    }

    pub fn loglik(&self, beta: &[f64]) -> f64 {
        par::map_collect(&self.blocks, |block| self.block_terms(block, beta).0)
            .into_iter()
            .sum()
    }

    fn block_terms(&self, block: &EventBlock, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let p = self.dim();
        let mut z = vec![0.0; p];
        let n = block.exposure.len();
        let mut etas = Vec::with_capacity(n);
        let mut max_eta = f64::NEG_INFINITY;
        for k in 0..n {
            self.covariates(block, k, &mut z);
            let eta: f64 = z.iter().zip(beta).map(|(a, b)| a * b).sum();
            max_eta = max_eta.max(eta);
            etas.push(eta);
        }
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        for (k, eta) in etas.iter().enumerate() {
            self.covariates(block, k, &mut z);
            let w = (eta - max_eta).exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * z[a];
                for b in 0..=a {
                    s2[a * p + b] += w * z[a] * z[b];
                }
            }
        }
        let d = block.failures.len() as f64;
        let mut ll = -d * (s0.ln() + max_eta);
        let mut u = vec![0.0; p];
        for &f in &block.failures {
            let k = f - block.first_at_risk;
            self.covariates(block, k, &mut z);
            ll += etas[k];
            for a in 0..p {
                u[a] += z[a];
            }
        }
        let mut info = vec![0.0; p * p];
        for a in 0..p {
            let ma = s1[a] / s0;
            u[a] -= d * ma;
            for b in 0..=a {
                let v = d * (s2[a * p + b] / s0 - ma * s1[b] / s0);
                info[a * p + b] = v;
                info[b * p + a] = v;
            }
        }
        (ll, u, info)
    }

    /// Breslow estimate of the baseline cumulative hazard at `beta`.
    pub fn breslow(&self, beta: &[f64]) -> StepFunction {
        let mut acc = 0.0;
        let mut z = vec![0.0; self.dim()];
        let (times, values) = self
            .blocks
            .iter()
            .map(|block| {
                let mut s0 = 0.0;
                for k in 0..block.exposure.len() {
                    self.covariates(block, k, &mut z);
                    s0 += z.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp();
                }
                acc += block.failures.len() as f64 / s0;
                (block.time, acc)
            })
            .unzip();
        StepFunction::new(times, values)
    }
}

pub fn fit_cox(c: &Cohort, paths: &[ExposurePath], fixed_covariates: &[String]) -> Result<CoxFit, SurvivalError> {
    let data = CoxData::new(c, paths, fixed_covariates)?;
    fit_cox_data(&data, &CoxOptions::default())
}

/// Newton-Raphson with step halving.
pub fn fit_cox_data(data: &CoxData, opts: &CoxOptions) -> Result<CoxFit, SurvivalError> {
    let p = data.dim();
    let mut beta = opts.start.clone().unwrap_or_else(|| vec![0.0; p]);
    let (ll0, mut score, mut info) = data.evaluate(&beta);
    let loglik_null = if beta.iter().all(|b| *b == 0.0) {
        ll0
    } else {
        data.loglik(&vec![0.0; p])
    };
    let mut ll = ll0;
    let initial_scale: Vec<f64> = info.diag();
    if let Some(col) = initial_scale.iter().position(|d| !(*d > 1e-12)) {
        return Err(SurvivalError::NonIdentifiable { column: col });
    }
    let mut trace = vec![beta.clone()];
    let mut iterations = 0;
    loop {
        if iterations >= opts.max_iterations {
            return Err(SurvivalError::Divergence { trace });
        }
        iterations += 1;
        let chol = match Cholesky::new(&info) {
            Ok(c) => c,
            Err(_) => {
                return Err(if iterations == 1 {
                    SurvivalError::NonIdentifiable { column: 0 }
                } else {
                    SurvivalError::Divergence { trace }
                })
            }
        };
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let (l, u, i) = data.evaluate(&trial);
            if l.is_finite() && l >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((trial, l, u, i));
                break;
            }
            scale *= 0.5;
        }
        let Some((new_beta, new_ll, new_score, new_info)) = accepted else {
            return Err(SurvivalError::Divergence { trace });
        };
        let max_step = step.iter().fold(0.0_f64, |m, s| m.max((scale * s).abs()));
        let gain = new_ll - ll;
        beta = new_beta;
        ll = new_ll;
        score = new_score;
        info = new_info;
        trace.push(beta.clone());

        // Monotone likelihood: information collapses while the coefficient runs off.
        let collapsed = info.diag().iter().zip(&initial_scale).any(|(d, d0)| *d < 1e-10 * d0);
        if collapsed {
            return Err(SurvivalError::Divergence { trace });
        }
        if max_step < 1e-9 || (gain.abs() < 1e-13 * ll.abs().max(1.0) && max_step < 1e-6) {
            break;
        }
    }
    let (cov, flat) = invert_information(&info).map_err(|_| SurvivalError::Divergence {
        trace: vec![beta.clone()],
    })?;
    if !flat.is_empty() {
        return Err(SurvivalError::NonIdentifiable { column: flat[0] });
    }
    let se_naive = cov.diag().iter().map(|v| v.sqrt()).collect();
    Ok(CoxFit {
        gamma: beta,
        se_naive,
        cov,
        loglik: ll,
        loglik_null,
        n_events: data.n_events(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubjectRecord, Visit};
    use crate::numerics::optim::fd_gradient;

    fn subject(id: &str, t: f64, e: bool) -> SubjectRecord {
        SubjectRecord::new(id, vec![Visit { time: 0.0, value: 0.0 }], t, e)
    }

    #[test]
    fn two_subject_separation_is_flagged() {
        let c = Cohort::new(vec![subject("a", 1.0, true), subject("b", 2.0, true)], true, vec![]).unwrap();
        let paths = vec![ExposurePath::constant(1.0, 2.0), ExposurePath::constant(0.0, 2.0)];
        let data = CoxData::new(&c, &paths, &[]).unwrap();
        // ℓ(γ) = γ − log(e^γ + 1)
        for g in [-1.0, 0.0, 0.7, 3.0] {
            let ll = data.loglik(&[g]);
            let hand = g - (g.exp() + 1.0).ln();
            assert!((ll - hand).abs() < 1e-14);
        }
        match fit_cox(&c, &paths, &[]) {
            Err(SurvivalError::Divergence { trace }) => {
                assert!(trace.last().unwrap()[0] > 10.0);
                assert!(trace.windows(2).all(|w| w[1][0] >= w[0][0]));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn constant_exposure_is_not_identifiable() {
        let c = Cohort::new(
            vec![
                subject("a", 1.0, true),
                subject("b", 2.0, true),
                subject("c", 3.0, false),
            ],
            true,
            vec![],
        )
        .unwrap();
        let paths = vec![ExposurePath::constant(2.0, 3.0); 3];
        assert!(matches!(
            fit_cox(&c, &paths, &[]),
            Err(SurvivalError::NonIdentifiable { column: 0 })
        ));
    }

    #[test]
    fn no_events() {
        let c = Cohort::new(vec![subject("a", 1.0, false)], true, vec![]).unwrap();
        let paths = vec![ExposurePath::constant(1.0, 1.0)];
        assert!(matches!(fit_cox(&c, &paths, &[]), Err(SurvivalError::NoEvents)));
    }

    #[test]
    fn score_and_information_match_finite_differences() {
        let mut subjects = Vec::new();
        let mut paths = Vec::new();
        for i in 0..30 {
            let fi = i as f64;
            let t = 0.5 + (fi * 0.37) % 4.0;
            let mut s = subject(&format!("s{i}"), t, i % 3 != 0);
            s.covariates.insert("age".into(), (fi * 1.7) % 5.0);
            subjects.push(s);
            paths.push(ExposurePath::polynomial(
                vec![(fi * 0.13) % 1.0 - 0.5, 0.2 + (fi * 0.07) % 0.5],
                5.0,
            ));
        }
        let c = Cohort::new(subjects, true, vec!["age".into()]).unwrap();
        let data = CoxData::new(&c, &paths, &["age".to_string()]).unwrap();
        let beta = [0.3, -0.2];
        let (_, score, info) = data.evaluate(&beta);
        let fd = fd_gradient(|b| data.loglik(b), &beta);
        for (a, b) in score.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
        for j in 0..2 {
            let h = 1e-5;
            let mut up = beta;
            up[j] += h;
            let mut down = beta;
            down[j] -= h;
            let (_, su, _) = data.evaluate(&up);
            let (_, sd, _) = data.evaluate(&down);
            for i in 0..2 {
                let fd_info = -(su[i] - sd[i]) / (2.0 * h);
                assert!((info[(i, j)] - fd_info).abs() <= 1e-4 * fd_info.abs().max(1.0));
            }
        }
        let fit = fit_cox(&c, &paths, &["age".to_string()]).unwrap();
        let (_, s, _) = data.evaluate(&fit.gamma);
        assert!(s.iter().all(|x| x.abs() < 1e-8));
        assert!(fit.loglik >= fit.loglik_null);
    }

    #[test]
    fn breslow_ties_counted() {
        let c = Cohort::new(
            vec![
                subject("a", 1.0, true),
                subject("b", 1.0, true),
                subject("c", 2.0, false),
            ],
            true,
            vec![],
        )
        .unwrap();
        let paths = vec![
            ExposurePath::constant(1.0, 2.0),
            ExposurePath::constant(0.0, 2.0),
            ExposurePath::constant(0.5, 2.0),
        ];
        let data = CoxData::new(&c, &paths, &[]).unwrap();
        let g: f64 = 0.4;
        let hand = g * 1.0 + 0.0 - 2.0 * (g.exp() + 1.0 + (0.5 * g).exp()).ln();
        assert!((data.loglik(&[g]) - hand).abs() < 1e-14);
        let bres = data.breslow(&[0.0]);
        assert!((bres.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
    }
}
