//! Long-format CSV: one row per subject-visit.
//!
//! Header: `subject_id,visit,D,A,L_1,...,L_p,Y` with an optional trailing
//! `C` column (`missing` or `invalid` marks a censored outcome). Empty
//! fields are undefined values. `Y` is filled only on a survivor's final
//! visit row.

use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

use super::{Censoring, CohortError, LongitudinalCohort, SubjectRecord, VisitRecord};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("malformed header: unexpected column '{column}' at position {position} (expected '{expected}')")]
    Header {
        column: String,
        position: usize,
        expected: String,
    },
    #[error("line {line}, column '{column}': cannot parse '{value}'")]
    Field {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Layout {
    n_covariates: usize,
    has_censoring: bool,
}

fn parse_header(header: &csv::StringRecord) -> Result<Layout, CsvError> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let bad = |position: usize, expected: &str| CsvError::Header {
        column: cols.get(position).unwrap_or(&"<end of header>").to_string(),
        position: position + 1,
        expected: expected.to_string(),
    };
    for (pos, want) in ["subject_id", "visit", "D", "A"].iter().enumerate() {
        if cols.get(pos) != Some(want) {
            return Err(bad(pos, want));
        }
    }
    let mut pos = 4;
    let mut n_covariates = 0;
    while let Some(c) = cols.get(pos) {
        if !c.starts_with("L_") {
            break;
        }
        let want = format!("L_{}", n_covariates + 1);
        if *c != want {
            return Err(bad(pos, &want));
        }
        n_covariates += 1;
        pos += 1;
    }
    if cols.get(pos) != Some(&"Y") {
        return Err(bad(pos, &format!("L_{} or Y", n_covariates + 1)));
    }
    pos += 1;
    let has_censoring = match cols.get(pos) {
        None => false,
        Some(&"C") if pos + 1 == cols.len() => true,
        Some(_) => return Err(bad(pos, "C or end of header")),
    };
    Ok(Layout {
        n_covariates,
        has_censoring,
    })
}

struct Row {
    visit: usize,
    dead: bool,
    treatment: Option<bool>,
    covariates: Vec<f64>,
    outcome: Option<f64>,
    censoring: Censoring,
    line: u64,
}

fn field_err(line: u64, column: &str, value: &str) -> CsvError {
    CsvError::Field {
        line,
        column: column.to_string(),
        value: value.to_string(),
    }
}

fn parse_bit(line: u64, column: &str, value: &str) -> Result<Option<bool>, CsvError> {
    match value.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(field_err(line, column, other)),
    }
}

fn parse_real(line: u64, column: &str, value: &str) -> Result<Option<f64>, CsvError> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(None);
    }
    v.parse::<f64>()
        .map(Some)
        .map_err(|_| field_err(line, column, v))
}

/// Reads a cohort in long format.
pub fn read_cohort_csv<R: Read>(reader: R) -> Result<LongitudinalCohort, CsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let layout = parse_header(rdr.headers()?)?;
    let p = layout.n_covariates;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let id = get(0).to_string();
        if id.is_empty() {
            return Err(CsvError::Row {
                line,
                message: "empty subject_id".into(),
            });
        }
        let visit = get(1)
            .parse::<usize>()
            .map_err(|_| field_err(line, "visit", get(1)))?;
        let dead = parse_bit(line, "D", get(2))?.ok_or_else(|| field_err(line, "D", ""))?;
        let treatment = parse_bit(line, "A", get(3))?;
        let mut covariates = Vec::with_capacity(p);
        let mut any_cov = false;
        for j in 0..p {
            let name = format!("L_{}", j + 1);
            match parse_real(line, &name, get(4 + j))? {
                Some(x) => {
                    any_cov = true;
                    covariates.push(x);
                }
                None => covariates.push(f64::NAN),
            }
        }
        if !any_cov {
            covariates.clear();
        }
        let outcome = parse_real(line, "Y", get(4 + p))?;
        let censoring = if layout.has_censoring {
            match get(5 + p).trim() {
                "" => Censoring::Observed,
                "missing" => Censoring::MissingOutcome,
                "invalid" => Censoring::InvalidOutcome,
                other => return Err(field_err(line, "C", other)),
            }
        } else {
            Censoring::Observed
        };
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(Row {
            visit,
            dead,
            treatment,
            covariates,
            outcome,
            censoring,
            line,
        });
    }
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut subject_rows = rows.remove(&id).unwrap_or_default();
        subject_rows.sort_by_key(|r| r.visit);
        let last = subject_rows.len().saturating_sub(1);
        let mut outcome = None;
        let mut censoring = Censoring::Observed;
        let mut visits = Vec::with_capacity(subject_rows.len());
        for (k, r) in subject_rows.into_iter().enumerate() {
            if r.visit != k {
                return Err(CsvError::Row {
                    line: r.line,
                    message: format!(
                        "subject {id}: visit {} out of sequence (expected {k})",
                        r.visit
                    ),
                });
            }
            if k == last {
                outcome = r.outcome;
                censoring = r.censoring;
            } else if r.outcome.is_some() || r.censoring != Censoring::Observed {
                return Err(CsvError::Row {
                    line: r.line,
                    message: format!("subject {id}: Y or C given before the final visit"),
                });
            }
            visits.push(VisitRecord {
                k,
                covariates: r.covariates,
                treatment: r.treatment,
                dead: r.dead,
            });
        }
        // A fully-undefined covariate vector is stored as empty; keep the
        // declared dimension for visits that recorded anything.
        subjects.push(SubjectRecord {
            id,
            visits,
            outcome,
            censoring,
        });
    }
    Ok(LongitudinalCohort::from_subjects_with_dim(subjects, p)?)
}

/// Writes a cohort in long format. Floats use the shortest round-trip form.
pub fn write_cohort_csv<W: Write>(cohort: &LongitudinalCohort, writer: W) -> Result<(), CsvError> {
    let p = cohort.n_covariates();
    let with_c = (0..cohort.n_subjects()).any(|i| cohort.censoring(i) != Censoring::Observed);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["subject_id".into(), "visit".into(), "D".into(), "A".into()];
    header.extend((1..=p).map(|j| format!("L_{j}")));
    header.push("Y".into());
    if with_c {
        header.push("C".into());
    }
    w.write_record(&header)?;
    let bit = |b: bool| if b { "1".to_string() } else { "0".to_string() };
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..cohort.n_subjects() {
        for k in 0..cohort.n_visits() {
            rec.clear();
            rec.push(cohort.id(i).into_owned());
            rec.push(k.to_string());
            rec.push(bit(cohort.dead(i, k)));
            if k < cohort.n_decisions() {
                rec.push(cohort.treatment(i, k).map(bit).unwrap_or_default());
                for &x in cohort.covariates(i, k) {
                    rec.push(if x.is_nan() {
                        String::new()
                    } else {
                        x.to_string()
                    });
                }
            } else {
                rec.push(String::new());
                rec.extend(std::iter::repeat_n(String::new(), p));
            }
            let last = k + 1 == cohort.n_visits();
            rec.push(match (last, cohort.outcome(i)) {
                (true, Some(y)) => y.to_string(),
                _ => String::new(),
            });
            if with_c {
                rec.push(match (last, cohort.censoring(i)) {
                    (true, Censoring::MissingOutcome) => "missing".into(),
                    (true, Censoring::InvalidOutcome) => "invalid".into(),
                    _ => String::new(),
                });
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
