//! Longitudinal-survival data model: visits, subjects, cohorts, time bases,
//! exposure paths and CSV ingestion.

pub mod basis;
pub mod cohort;
pub mod csv_io;
pub mod path;

use thiserror::Error;

pub use basis::TimeBasis;
pub use cohort::{truncate_at_event, Cohort, SubjectRecord, Visit};
pub use csv_io::{read_cohort, read_cohort_from, write_cohort, write_cohort_to, ReadOptions, ReadReport};
pub use path::{ExposurePath, PathShape, Trajectory};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DataError {
    #[error("no visits")]
    NoVisitsInFile,
    #[error("cohort has no subjects")]
    Empty,
    #[error("subject {id}: no exposure visits")]
    NoVisits { id: String },
    #[error("subject {id} appears in the longitudinal file but not in the survival file")]
    UnknownId { id: String },
    #[error("subject {id} is listed more than once")]
    DuplicateId { id: String },
    #[error("subject {id}: visit times are not strictly increasing")]
    NonMonotone { id: String },
    #[error("subject {id}: negative or non-finite visit time")]
    NegativeTime { id: String },
    #[error("subject {id}: non-finite exposure value")]
    NonFiniteValue { id: String },
    #[error("subject {id}: event time must be positive and finite")]
    EventTime { id: String },
    #[error("subject {id}: visit at {time} after event time {event_time}")]
    VisitAfterEvent { id: String, time: f64, event_time: f64 },
    #[error("subject {id}: missing covariate '{name}'")]
    MissingCovariate { id: String, name: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("invalid basis: {0}")]
    Basis(String),
}
