use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DataError;

/// One exposure measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Years since baseline.
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub visits: Vec<Visit>,
    /// Observed event or censoring time, in years.
    pub event_time: f64,
    pub event: bool,
    pub covariates: BTreeMap<String, f64>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, visits: Vec<Visit>, event_time: f64, event: bool) -> Self {
        SubjectRecord {
            id: id.into(),
            visits,
            event_time,
            event,
            covariates: BTreeMap::new(),
        }
    }

    pub fn has_visits(&self) -> bool {
        !self.visits.is_empty()
    }

    pub fn last_visit_time(&self) -> Option<f64> {
        self.visits.last().map(|v| v.time)
    }

    pub fn covariate(&self, name: &str) -> Result<f64, DataError> {
        self.covariates
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingCovariate {
                id: self.id.clone(),
                name: name.to_string(),
            })
    }

    fn validate(&self, truncated: bool) -> Result<(), DataError> {
        if !(self.event_time > 0.0) || !self.event_time.is_finite() {
            return Err(DataError::EventTime { id: self.id.clone() });
        }
        for v in &self.visits {
            if v.time < 0.0 || !v.time.is_finite() {
                return Err(DataError::NegativeTime { id: self.id.clone() });
            }
            if !v.value.is_finite() {
                return Err(DataError::NonFiniteValue { id: self.id.clone() });
            }
        }
        if self.visits.windows(2).any(|w| !(w[0].time < w[1].time)) {
            return Err(DataError::NonMonotone { id: self.id.clone() });
        }
        if truncated {
            if let Some(t) = self.last_visit_time() {
                if t > self.event_time {
                    return Err(DataError::VisitAfterEvent {
                        id: self.id.clone(),
                        time: t,
                        event_time: self.event_time,
                    });
                }
            }
        }
        Ok(())
    }
}

/// The analysis sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    subjects: Vec<SubjectRecord>,
    truncated_at_event: bool,
    covariate_names: Vec<String>,
}

impl Cohort {
    /// Validates and builds a cohort. Every subject must have at least one
    /// visit; subjects that lose all their visits through
    /// [`truncate_at_event`] are the only exception.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        truncated_at_event: bool,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::Empty);
        }
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId { id: s.id.clone() });
            }
            if s.visits.is_empty() {
                return Err(DataError::NoVisits { id: s.id.clone() });
            }
            s.validate(truncated_at_event)?;
            for name in &covariate_names {
                s.covariate(name)?;
            }
        }
        Ok(Cohort {
            subjects,
            truncated_at_event,
            covariate_names,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn truncated_at_event(&self) -> bool {
        self.truncated_at_event
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn n_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    pub fn all_visit_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.visits.iter().map(|v| v.time))
            .collect()
    }

    /// Same subjects, each listed twice under distinct ids. Used to check
    /// likelihood additivity.
    pub fn duplicated(&self) -> Cohort {
        let mut subjects = self.subjects.clone();
        subjects.extend(self.subjects.iter().map(|s| SubjectRecord {
            id: format!("{}#dup", s.id),
            ..s.clone()
        }));
        Cohort {
            subjects,
            truncated_at_event: self.truncated_at_event,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Drops every visit after the subject's event or censoring time.
pub fn truncate_at_event(c: &Cohort) -> Cohort {
    let subjects = c
        .subjects
        .iter()
        .map(|s| SubjectRecord {
            visits: s.visits.iter().copied().filter(|v| v.time <= s.event_time).collect(),
            ..s.clone()
        })
        .collect();
    Cohort {
        subjects,
        truncated_at_event: true,
        covariate_names: c.covariate_names.clone(),
    }
}
