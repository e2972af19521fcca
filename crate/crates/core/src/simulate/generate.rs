use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::{ScenarioConfig, SimulateError};
use crate::data::{Cohort, DataError, ExposurePath, SubjectRecord, TimeBasis, Trajectory, Visit};
use crate::numerics::{brent_root, cholesky_psd, draw_normal, RngStream};
use crate::par;
use crate::survival::cumulative_hazard;

/// Oracle side channel: what the generator knew.
#[derive(Debug, Clone)]
pub struct GeneratedTruth {
    pub random_effects: Vec<Vec<f64>>,
    /// Event time before administrative censoring; infinite when the
    /// cumulative hazard never reaches its target.
    pub event_times: Vec<f64>,
    /// `−log U`, the cumulative hazard reached at the true event time.
    pub hazard_targets: Vec<f64>,
    pub paths: Vec<ExposurePath>,
    /// Same subjects with visits continuing to the horizon regardless of
    /// the event, as observed without truncation.
    pub full_cohort: Cohort,
}

struct Subject {
    u: Vec<f64>,
    target: f64,
    t_true: f64,
    path: ExposurePath,
    truncated: SubjectRecord,
    full: SubjectRecord,
}

/// Generates one cohort. Subject `i` draws only from `stream.derive(i)`, so
/// the result does not depend on how the work is scheduled.
pub fn generate(cfg: &ScenarioConfig, stream: &RngStream) -> Result<(Cohort, GeneratedTruth), SimulateError> {
    cfg.validate()?;
    let root = cholesky_psd(&cfg.re_cov, 1e-14).map_err(|e| SimulateError::Config(e.to_string()))?;
    let basis = Arc::new(TimeBasis::polynomial(cfg.trajectory.degree()));
    let schedule: Vec<f64> = (0..cfg.scheduled_visits())
        .map(|k| k as f64 * cfg.visit_spacing)
        .collect();
    let width = cfg.n_subjects.to_string().len();

    let subjects = par::map_range(cfg.n_subjects, |i| {
        let mut rng = stream.derive(i as u64);
        let u = draw_normal(&mut rng, &vec![0.0; cfg.fixed_effects.len()], &root).expect("dimensions validated");
        let coef: Vec<f64> = cfg.fixed_effects.iter().zip(&u).map(|(b, v)| b + v).collect();
        let path = ExposurePath::trajectory(
            Trajectory {
                fixed_basis: basis.clone(),
                fixed_coef: coef,
                random_basis: basis.clone(),
                random_coef: Vec::new(),
                offset: 0.0,
                jump: None,
            },
            cfg.horizon,
        );
        let target = -rng.uniform().ln();
        let t_true = event_time(cfg, &path, target);
        let (event_time, event) = if t_true <= cfg.horizon {
            (t_true, true)
        } else {
            (cfg.horizon, false)
        };

        let mut full_visits = Vec::with_capacity(schedule.len());
        for (k, &t) in schedule.iter().enumerate() {
            let dropped = k > 0 && cfg.missing_rate > 0.0 && rng.bernoulli(cfg.missing_rate);
            let noise = cfg.error_sd * rng.normal();
            if !dropped {
                full_visits.push(Visit {
                    time: t,
                    value: path.value(t) + noise,
                });
            }
        }
        let truncated_visits = full_visits.iter().copied().filter(|v| v.time <= event_time).collect();
        let id = format!("{:0width$}", i + 1);
        Subject {
            u,
            target,
            t_true,
            path,
            truncated: SubjectRecord::new(id.clone(), truncated_visits, event_time, event),
            full: SubjectRecord::new(id, full_visits, event_time, event),
        }
    });

    let n = subjects.len();
    let (mut random_effects, mut event_times, mut hazard_targets, mut paths) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut truncated = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    for s in subjects {
        random_effects.push(s.u);
        event_times.push(s.t_true);
        hazard_targets.push(s.target);
        paths.push(s.path);
        truncated.push(s.truncated);
        full.push(s.full);
    }
    let truth = GeneratedTruth {
        random_effects,
        event_times,
        hazard_targets,
        paths,
        full_cohort: Cohort::new(full, false, Vec::new())?,
    };
    Ok((Cohort::new(truncated, true, Vec::new())?, truth))
}

/// Solves `Λ(T) = target`, growing the bracket past the horizon so that the
/// recorded true time is exact even when it will be censored.
fn event_time(cfg: &ScenarioConfig, path: &ExposurePath, target: f64) -> f64 {
    let lam = |t: f64| cumulative_hazard(&cfg.baseline, path, cfg.gamma_true, t) - target;
    let mut hi = cfg.horizon;
    let mut lo = 0.0;
    let mut tries = 0;
    while lam(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        tries += 1;
        if tries > 10 || !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    brent_root(lam, lo, hi, 1e-12).unwrap_or(f64::INFINITY)
}

/// Truth sidecar: `id,u0,..,u{q-1},true_event_time,hazard_target`.
pub fn write_truth_to<W: Write>(c: &Cohort, truth: &GeneratedTruth, out: W) -> Result<(), DataError> {
    let io = |e: csv::Error| DataError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let q = truth.random_effects.first().map_or(0, Vec::len);
    let mut header = vec!["id".to_string()];
    header.extend((0..q).map(|k| format!("u{k}")));
    header.push("true_event_time".into());
    header.push("hazard_target".into());
    w.write_record(&header).map_err(io)?;
    for (i, s) in c.subjects().iter().enumerate() {
        let mut row = vec![s.id.clone()];
        row.extend(truth.random_effects[i].iter().map(|v| v.to_string()));
        row.push(truth.event_times[i].to_string());
        row.push(truth.hazard_targets[i].to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))
}

pub fn write_truth(c: &Cohort, truth: &GeneratedTruth, path: &Path) -> Result<(), DataError> {
    let f = std::fs::File::create(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    write_truth_to(c, truth, std::io::BufWriter::new(f))
}
