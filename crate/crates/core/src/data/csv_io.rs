//! CSV ingestion and export.
//!
//! Longitudinal file: `id,time,value[,covariate...]`, one row per visit.
//! Covariates are baseline values and are read from each subject's first
//! row. Survival file: `id,event_time,event` with `event ∈ {0,1}`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::cohort::{Cohort, SubjectRecord, Visit};
use super::DataError;

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Reject visits recorded after the event/censoring time. A cohort read
    /// in strict mode is flagged as truncated at the event.
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReadReport {
    /// Longitudinal rows skipped because the exposure value was missing.
    pub dropped_missing: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | ".")
}

fn parse_f64(field: &str, what: &str, line: u64) -> Result<f64, DataError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| DataError::Parse(format!("line {line}: cannot parse {what} '{field}'")))
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

pub fn read_cohort(
    longitudinal_csv: &Path,
    survival_csv: &Path,
    opts: ReadOptions,
) -> Result<(Cohort, ReadReport), DataError> {
    let long = std::fs::File::open(longitudinal_csv)
        .map_err(|e| DataError::Io(format!("{}: {e}", longitudinal_csv.display())))?;
    let surv =
        std::fs::File::open(survival_csv).map_err(|e| DataError::Io(format!("{}: {e}", survival_csv.display())))?;
    read_cohort_from(long, surv, opts)
}

pub fn read_cohort_from<L: Read, S: Read>(
    longitudinal: L,
    survival: S,
    opts: ReadOptions,
) -> Result<(Cohort, ReadReport), DataError> {
    let mut surv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(survival);
    let headers = surv_reader.headers().map_err(csv_err)?.clone();
    let (i_id, i_time, i_event) = (
        header_index(&headers, "id")?,
        header_index(&headers, "event_time")?,
        header_index(&headers, "event")?,
    );
    let mut order: Vec<String> = Vec::new();
    let mut survival_rows: HashMap<String, (f64, bool)> = HashMap::new();
    for rec in surv_reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[i_id].to_string();
        let t = parse_f64(&rec[i_time], "event_time", line)?;
        let e = match rec[i_event].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(DataError::Parse(format!(
                    "line {line}: event must be 0 or 1, got '{other}'"
                )))
            }
        };
        if survival_rows.insert(id.clone(), (t, e)).is_some() {
            return Err(DataError::DuplicateId { id });
        }
        order.push(id);
    }

    let mut long_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(longitudinal);
    let headers = long_reader.headers().map_err(csv_err)?.clone();
    let (l_id, l_time, l_value) = (
        header_index(&headers, "id")?,
        header_index(&headers, "time")?,
        header_index(&headers, "value")?,
    );
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| ![l_id, l_time, l_value].contains(i))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut visits: HashMap<String, Vec<Visit>> = HashMap::new();
    let mut covariates: HashMap<String, BTreeMap<String, f64>> = HashMap::new();
    let mut report = ReadReport::default();
    let mut n_rows = 0usize;
    for rec in long_reader.records() {
        let rec = rec.map_err(csv_err)?;
        n_rows += 1;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[l_id].to_string();
        if !survival_rows.contains_key(&id) {
            return Err(DataError::UnknownId { id });
        }
        if !covariates.contains_key(&id) {
            let mut cov = BTreeMap::new();
            for (i, name) in &covariate_cols {
                if is_missing(&rec[*i]) {
                    return Err(DataError::MissingCovariate {
                        id: id.clone(),
                        name: name.clone(),
                    });
                }
                cov.insert(name.clone(), parse_f64(&rec[*i], name, line)?);
            }
            covariates.insert(id.clone(), cov);
        }
        let time = parse_f64(&rec[l_time], "time", line)?;
        if time < 0.0 {
            return Err(DataError::NegativeTime { id });
        }
        if is_missing(&rec[l_value]) {
            report.dropped_missing += 1;
            continue;
        }
        let value = parse_f64(&rec[l_value], "value", line)?;
        visits.entry(id).or_default().push(Visit { time, value });
    }
    if n_rows == 0 {
        return Err(DataError::NoVisitsInFile);
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let (event_time, event) = survival_rows[&id];
        let v = visits.remove(&id).unwrap_or_default();
        if v.windows(2).any(|w| !(w[0].time < w[1].time)) {
            return Err(DataError::NonMonotone { id });
        }
        let mut s = SubjectRecord::new(id.clone(), v, event_time, event);
        s.covariates = covariates.remove(&id).unwrap_or_default();
        subjects.push(s);
    }
    let names = covariate_cols.into_iter().map(|(_, n)| n).collect();
    let cohort = Cohort::new(subjects, opts.strict, names)?;
    Ok((cohort, report))
}

/// Writes the two CSV files. Values use Rust's shortest round-trip float
/// formatting, so reading them back reproduces the cohort exactly.
pub fn write_cohort(c: &Cohort, longitudinal_csv: &Path, survival_csv: &Path) -> Result<(), DataError> {
    let long = std::fs::File::create(longitudinal_csv)
        .map_err(|e| DataError::Io(format!("{}: {e}", longitudinal_csv.display())))?;
    let surv =
        std::fs::File::create(survival_csv).map_err(|e| DataError::Io(format!("{}: {e}", survival_csv.display())))?;
    write_cohort_to(c, long, surv)
}

pub fn write_cohort_to<L: Write, S: Write>(c: &Cohort, longitudinal: L, survival: S) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(longitudinal);
    let mut header = vec!["id".to_string(), "time".into(), "value".into()];
    header.extend(c.covariate_names().iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for s in c.subjects() {
        for v in &s.visits {
            let mut row = vec![s.id.clone(), v.time.to_string(), v.value.to_string()];
            for name in c.covariate_names() {
                row.push(s.covariate(name)?.to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))?;

    let mut w = csv::Writer::from_writer(survival);
    w.write_record(["id", "event_time", "event"]).map_err(csv_err)?;
    for s in c.subjects() {
        w.write_record([
            s.id.clone(),
            s.event_time.to_string(),
            if s.event { "1".into() } else { "0".into() },
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> DataError {
    DataError::Parse(e.to_string())
}
