//! Monte Carlo study runner: replicates a scenario, applies the requested
//! methods to each generated cohort and summarises their performance.

mod metrics;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeBasis;
use crate::estimators::{
    estimate_jm, estimate_locf, estimate_mi_with, estimate_rc, EstimateResult, ImputationModel, JmBaseline, Method,
    MiOptions, DEFAULT_IMPUTATIONS, DEFAULT_N_BOOT, DEFAULT_N_QUAD,
};
use crate::lmm::LmmSpec;
use crate::numerics::RngStream;
use crate::par;
use crate::simulate::{generate, ScenarioConfig, SimulateError};

pub use metrics::{compute_metrics, Metrics};
pub use report::{emit_report, read_report, render_svg, write_replicates_csv, write_summary_csv, ReportFormat};

pub const DEFAULT_REPLICATES: usize = 200;

/// Offset of the estimator streams within a replicate's lineage, clear of
/// the per-subject streams used by the generator.
const METHOD_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("{method}: need at least 2 successful estimates, got {n}")]
    InsufficientData { method: String, n: usize },
    #[error("report has no methods")]
    EmptyReport,
    #[error("{0}")]
    Io(String),
}

fn default_n_boot() -> usize {
    DEFAULT_N_BOOT
}
fn default_imputations() -> usize {
    DEFAULT_IMPUTATIONS
}
fn default_n_quad() -> usize {
    DEFAULT_N_QUAD
}
fn default_parallelism() -> usize {
    1
}
fn default_baseline() -> JmBaseline {
    JmBaseline::Weibull
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: ScenarioConfig,
    pub n_replicates: usize,
    pub methods: Vec<Method>,
    pub base_seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Bootstrap draws for RC and PE-RC; 0 reports the naive Cox SE.
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_imputations")]
    pub m_imputations: usize,
    /// Optional bootstrap layer for MI.
    #[serde(default)]
    pub mi_boot: Option<usize>,
    #[serde(default)]
    pub imputation_model: ImputationModel,
    #[serde(default = "default_n_quad")]
    pub n_quad: usize,
    #[serde(default = "default_baseline")]
    pub jm_baseline: JmBaseline,
}

impl StudyConfig {
    /// Defaults for everything but the scenario, methods and seed.
    pub fn new(scenario: ScenarioConfig, methods: Vec<Method>, n_replicates: usize, base_seed: u64) -> Self {
        StudyConfig {
            scenario,
            n_replicates,
            methods,
            base_seed,
            parallelism: 1,
            n_boot: DEFAULT_N_BOOT,
            m_imputations: DEFAULT_IMPUTATIONS,
            mi_boot: None,
            imputation_model: ImputationModel::default(),
            n_quad: DEFAULT_N_QUAD,
            jm_baseline: JmBaseline::Weibull,
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.n_replicates == 0 {
            return Err(StudyError::Config("n_replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(StudyError::Config("no methods requested".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(StudyError::Config("methods listed more than once".into()));
        }
        if self.m_imputations < 2 {
            return Err(StudyError::Config("m_imputations must be at least 2".into()));
        }
        if self.n_boot == 1 {
            return Err(StudyError::Config("n_boot must be 0 or at least 2".into()));
        }
        self.scenario.validate()?;
        Ok(())
    }

    /// Mixed-model specification matching the generating trajectory.
    pub fn lmm_spec(&self) -> LmmSpec {
        LmmSpec::shared(TimeBasis::polynomial(self.scenario.trajectory.degree()))
    }
}

/// One method applied to one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub method: Method,
    pub result: Option<EstimateResult>,
    pub error: Option<String>,
}

impl ReplicateRow {
    /// The estimate if the fit succeeded and converged.
    pub fn usable(&self) -> Option<&EstimateResult> {
        self.result.as_ref().filter(|r| r.converged && r.gamma_hat.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// `None` when fewer than two replicates produced an estimate.
    pub metrics: Option<Metrics>,
    pub n_converged: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: String,
    pub gamma_true: f64,
    pub n_replicates: usize,
    pub summaries: Vec<MethodSummary>,
    pub rows: Vec<ReplicateRow>,
}

impl StudyReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn metrics(&self, method: Method) -> Option<&Metrics> {
        self.summary(method).and_then(|s| s.metrics.as_ref())
    }

    /// True when every requested method produced metrics.
    pub fn complete(&self) -> bool {
        !self.summaries.is_empty() && self.summaries.iter().all(|s| s.metrics.is_some())
    }

    /// Usable estimates of `method`, in replicate order.
    pub fn estimates(&self, method: Method) -> Vec<&EstimateResult> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(ReplicateRow::usable)
            .collect()
    }
}

/// Applies one method to one replicate. The cohort and the method streams
/// depend only on `(base_seed, replicate)`.
pub fn run_replicate(cfg: &StudyConfig, replicate: usize) -> Result<Vec<ReplicateRow>, StudyError> {
    let stream = RngStream::new(cfg.base_seed, replicate as u64);
    let (cohort, truth) = generate(&cfg.scenario, &stream)?;
    let spec = cfg.lmm_spec();
    let rows = cfg
        .methods
        .iter()
        .map(|&method| {
            let ms = stream.derive(METHOD_STREAM_BASE + method as u64);
            let res = match method {
                Method::Locf => estimate_locf(&cohort),
                Method::Rc => estimate_rc(&cohort, &spec, false, cfg.n_boot, &ms),
                Method::PeRc => estimate_rc(&truth.full_cohort, &spec, true, cfg.n_boot, &ms),
                Method::Mi => estimate_mi_with(
                    &cohort,
                    &spec,
                    &MiOptions {
                        m_imputations: cfg.m_imputations,
                        n_boot: cfg.mi_boot,
                        model: cfg.imputation_model,
                    },
                    &ms,
                ),
                Method::Jm => estimate_jm(&cohort, &spec, cfg.jm_baseline, cfg.n_quad),
            };
            let (result, error) = match res {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ReplicateRow {
                replicate,
                method,
                result,
                error,
            }
        })
        .collect();
    Ok(rows)
}

/// Runs every replicate on a pool of `cfg.parallelism` threads and
/// aggregates. A method with fewer than two usable estimates is reported
/// without metrics; the study itself carries on.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport, StudyError> {
    cfg.validate()?;
    let per_rep = par::with_jobs(cfg.parallelism, || {
        par::map_range(cfg.n_replicates, |r| run_replicate(cfg, r))
    });
    let mut rows = Vec::with_capacity(cfg.n_replicates * cfg.methods.len());
    for r in per_rep {
        rows.extend(r?);
    }
    Ok(summarise(
        &cfg.scenario.label,
        cfg.scenario.gamma_true,
        cfg.n_replicates,
        &cfg.methods,
        rows,
    ))
}

/// Builds a report from raw rows.
pub fn summarise(
    scenario: &str,
    gamma_true: f64,
    n_replicates: usize,
    methods: &[Method],
    rows: Vec<ReplicateRow>,
) -> StudyReport {
    let mut by_method: BTreeMap<Method, Vec<&ReplicateRow>> = BTreeMap::new();
    for r in &rows {
        by_method.entry(r.method).or_default().push(r);
    }
    let summaries = methods
        .iter()
        .map(|&m| {
            let these = by_method.get(&m).map(Vec::as_slice).unwrap_or(&[]);
            let usable: Vec<EstimateResult> = these.iter().filter_map(|r| r.usable()).cloned().collect();
            MethodSummary {
                method: m,
                metrics: compute_metrics(&usable, gamma_true).ok(),
                n_converged: usable.len(),
                n_failed: these.len() - usable.len(),
            }
        })
        .collect();
    StudyReport {
        scenario: scenario.to_string(),
        gamma_true,
        n_replicates,
        summaries,
        rows,
    }
}
