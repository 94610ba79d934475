//! Patient-level table loading and feature encoding.
//!
//! A [`RawTable`] is read from delimited text, then [`load_cohort`] derives
//! rates and composite code indicators, applies log transforms and z-scores,
//! dummy-codes categorical covariates and records observedness in the mask.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::cohort::{Cohort, CohortError, StandardizationStats};
use crate::config::{CodeListRef, CovariateKind, ModelConfig, Transform};

/// Allergy-related diagnosis codes used by the default composite indicator.
pub const ALLERGY_CODES: [&str; 22] = [
    "J309", "J301", "J3081", "Z9109", "J3089", "Z91012", "Z91014", "Z91018", "Z91013", "Z91040", "Z91038",
    "Z91030", "Z91010", "Z0182", "J305", "Z91048", "Z91041", "Z91011", "Z9102", "Z88", "L23", "L20",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("table has no header row")]
    NoHeader,
    #[error("duplicate column name \"{0}\"")]
    DuplicateHeader(String),
    #[error("row {row} has {got} cells, header has {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("configured column \"{0}\" is not in the table")]
    MissingColumn(String),
    #[error("row {row}, column \"{column}\": unknown categorical level \"{value}\"")]
    UnknownLevel { row: usize, column: String, value: String },
    #[error("row {row}, column \"{column}\": required value is missing")]
    MissingCell { row: usize, column: String },
    #[error("row {row}, column \"{column}\": expected a number, found \"{value}\"")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column \"{column}\": binary value must be 0 or 1, found {value}")]
    NotBinary { row: usize, column: String, value: f64 },
    #[error("follow-up years must be positive, got {0}")]
    NonPositiveYears(f64),
    #[error("row {row}, column \"{column}\": count must be a nonnegative integer, got {value}")]
    BadCount { row: usize, column: String, value: f64 },
    #[error("row {row}, column \"{column}\": log transform needs a positive value, got {value}")]
    NonPositiveLog { row: usize, column: String, value: f64 },
    #[error("column \"{0}\" is degenerate: need at least two observed values with nonzero variance")]
    Degenerate(String),
    #[error("invalid code list: {0}")]
    CodeList(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Number(f64),
    Text(String),
    Missing,
}

impl Cell {
    /// Empty strings and the literal `NA` are missing.
    pub fn parse(raw: &str) -> Cell {
        let t = raw.trim();
        if t.is_empty() || t == "NA" {
            Cell::Missing
        } else if let Ok(v) = t.parse::<f64>() {
            Cell::Number(v)
        } else {
            Cell::Text(t.to_string())
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Number(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }
}

/// Rectangular table of cells with unique header names.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl RawTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Cell>>) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c) {
                return Err(IngestError::DuplicateHeader(c.clone()));
            }
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(IngestError::Ragged { row: i, got: r.len(), expected: columns.len() });
            }
        }
        Ok(RawTable { columns, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize, IngestError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    }

    pub fn read<R: Read>(reader: R, delimiter: u8) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if columns.is_empty() || (columns.len() == 1 && columns[0].is_empty()) {
            return Err(IngestError::NoHeader);
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(rec.iter().map(Cell::parse).collect());
        }
        RawTable::new(columns, rows)
    }

    pub fn read_path(path: &Path, delimiter: u8) -> Result<Self, IngestError> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        Self::read(std::io::BufReader::new(file), delimiter)
    }

    pub fn write<W: Write>(&self, writer: W, delimiter: u8) -> Result<(), IngestError> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.flush().map_err(|e| IngestError::Io { path: "<table>".into(), source: e })?;
        Ok(())
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.display().to_string(), source }
}

/// Exact-match diagnosis code set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeList {
    codes: BTreeSet<String>,
}

impl CodeList {
    pub fn new<I, S>(codes: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for c in codes {
            let c = c.as_ref();
            if c.is_empty() || c.chars().any(char::is_whitespace) || c.to_uppercase() != c {
                return Err(IngestError::CodeList(format!("code \"{c}\" must be uppercase without whitespace")));
            }
            set.insert(c.to_string());
        }
        if set.is_empty() {
            return Err(IngestError::CodeList("code list is empty".into()));
        }
        Ok(CodeList { codes: set })
    }

    pub fn allergy_default() -> Self {
        CodeList::new(ALLERGY_CODES).expect("built-in list is valid")
    }

    pub fn resolve(r: &CodeListRef) -> Result<Self, IngestError> {
        match r {
            CodeListRef::Named(n) if n == "allergy" => Ok(Self::allergy_default()),
            CodeListRef::Named(n) => Err(IngestError::CodeList(format!("unknown named code list \"{n}\""))),
            CodeListRef::Explicit(v) => CodeList::new(v),
        }
    }

    /// Codes in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(String::as_str)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.contains(code)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Annual rate from an event count; no events means the rate is unobserved.
pub fn derive_rate(count: u64, years: f64) -> Result<Option<f64>, IngestError> {
    if !(years > 0.0) || !years.is_finite() {
        return Err(IngestError::NonPositiveYears(years));
    }
    Ok(if count == 0 { None } else { Some(count as f64 / years) })
}

/// 1 iff any of the record's codes is on the list.
pub fn composite_indicator<'a, I>(record_codes: I, code_list: &CodeList) -> u8
where
    I: IntoIterator<Item = &'a str>,
{
    u8::from(record_codes.into_iter().any(|c| code_list.contains(c)))
}

#[derive(Debug, Error, PartialEq)]
pub enum StandardizeError {
    #[error("value at index {index} is not positive under log transform ({value})")]
    NonPositive { index: usize, value: f64 },
    #[error("need at least two observed values with nonzero variance")]
    Degenerate,
}

fn transform_values(values: &[Option<f64>], transform: Transform) -> Result<Vec<Option<f64>>, StandardizeError> {
    values
        .iter()
        .enumerate()
        .map(|(index, v)| match (v, transform) {
            (None, _) => Ok(None),
            (Some(x), Transform::None) => Ok(Some(*x)),
            (Some(x), Transform::Log) if *x > 0.0 => Ok(Some(x.ln())),
            (Some(x), Transform::Log) => Err(StandardizeError::NonPositive { index, value: *x }),
        })
        .collect()
}

/// Mean and n−1 sample sd over observed entries, summed in index order.
fn moments(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let observed: Vec<f64> = values.iter().flatten().copied().collect();
    if observed.len() < 2 {
        return None;
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let ss: f64 = observed.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if sd > 0.0 && sd.is_finite() {
        Some((mean, sd))
    } else {
        None
    }
}

/// Log-transforms (optionally) and z-scores the observed entries; missing
/// entries stay missing.
pub fn standardize(
    values: &[Option<f64>],
    transform: Transform,
) -> Result<(Vec<Option<f64>>, StandardizationStats), StandardizeError> {
    let t = transform_values(values, transform)?;
    let (mean, sd) = moments(&t).ok_or(StandardizeError::Degenerate)?;
    let out = t.iter().map(|v| v.map(|x| (x - mean) / sd)).collect();
    Ok((out, StandardizationStats { transform, mean, sd }))
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Column used as record identifier; row numbers are used when absent.
    pub id_column: String,
    /// Drop rows with any missing covariate instead of failing.
    pub drop_incomplete_covariates: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { id_column: "id".into(), drop_incomplete_covariates: false }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    /// Input row indices removed by the covariate pre-filter.
    pub dropped_rows: Vec<usize>,
}

fn number(cell: &Cell, row: usize, column: &str) -> Result<Option<f64>, IngestError> {
    match cell {
        Cell::Number(v) => Ok(Some(*v)),
        Cell::Missing => Ok(None),
        Cell::Text(s) => Err(IngestError::NonNumeric { row, column: column.to_string(), value: s.clone() }),
    }
}

fn level_matches(cell: &Cell, level: &str) -> bool {
    match cell {
        Cell::Text(s) => s == level,
        Cell::Number(v) => level.trim().parse::<f64>().map(|l| l == *v).unwrap_or(false),
        Cell::Missing => false,
    }
}

/// Encodes a table into model matrices according to `config`.
pub fn load_cohort(table: &RawTable, config: &ModelConfig, options: &LoadOptions) -> Result<LoadedCohort, IngestError> {
    let id_col = table.columns.iter().position(|c| *c == options.id_column);

    // Covariate pre-filter (explicit opt-in).
    let mut covariate_cols = Vec::with_capacity(config.covariates.len());
    for c in &config.covariates {
        covariate_cols.push(table.column_index(&c.name)?);
    }
    let mut keep = Vec::with_capacity(table.rows.len());
    let mut dropped_rows = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        if options.drop_incomplete_covariates && covariate_cols.iter().any(|&c| row[c] == Cell::Missing) {
            dropped_rows.push(i);
        } else {
            keep.push(i);
        }
    }
    let n = keep.len();

    let ids: Vec<String> = keep
        .iter()
        .map(|&i| match id_col {
            Some(c) => table.rows[i][c].render(),
            None => (i + 1).to_string(),
        })
        .collect();

    // Covariates: numeric (optionally z-scored) or dummy-coded categorical.
    let columns = config.covariate_columns();
    let m = columns.len();
    let mut x = vec![0.0; n * m];
    let mut covariate_stats = Vec::with_capacity(m);
    let mut col = 0;
    for (spec, &tc) in config.covariates.iter().zip(&covariate_cols) {
        match &spec.kind {
            CovariateKind::Numeric => {
                let mut values = Vec::with_capacity(n);
                for &i in &keep {
                    match number(&table.rows[i][tc], i, &spec.name)? {
                        Some(v) if v.is_finite() => values.push(Some(v)),
                        Some(_) => {
                            return Err(IngestError::NonNumeric {
                                row: i,
                                column: spec.name.clone(),
                                value: table.rows[i][tc].render(),
                            })
                        }
                        None => return Err(IngestError::MissingCell { row: i, column: spec.name.clone() }),
                    }
                }
                let (values, stats) = if spec.standardize {
                    let (z, s) = standardize(&values, Transform::None)
                        .map_err(|_| IngestError::Degenerate(spec.name.clone()))?;
                    (z, Some(s))
                } else {
                    (values, None)
                };
                for (r, v) in values.iter().enumerate() {
                    x[r * m + col] = v.expect("covariates are complete");
                }
                covariate_stats.push(stats);
                col += 1;
            }
            CovariateKind::Categorical { levels, reference } => {
                let dummies: Vec<&String> = levels.iter().filter(|l| *l != reference).collect();
                for (r, &i) in keep.iter().enumerate() {
                    let cell = &table.rows[i][tc];
                    if *cell == Cell::Missing {
                        return Err(IngestError::MissingCell { row: i, column: spec.name.clone() });
                    }
                    if !levels.iter().any(|l| level_matches(cell, l)) {
                        return Err(IngestError::UnknownLevel {
                            row: i,
                            column: spec.name.clone(),
                            value: cell.render(),
                        });
                    }
                    for (d, level) in dummies.iter().enumerate() {
                        x[r * m + col + d] = if level_matches(cell, level) { 1.0 } else { 0.0 };
                    }
                }
                covariate_stats.extend(std::iter::repeat_n(None, dummies.len()));
                col += dummies.len();
            }
        }
    }

    // Continuous features.
    let j = config.continuous_features.len();
    let mut y = vec![f64::NAN; n * j];
    let mut r_mask = vec![0u8; n * j];
    let mut feature_stats = Vec::with_capacity(j);
    for (fj, spec) in config.continuous_features.iter().enumerate() {
        let tc = table.column_index(&spec.name)?;
        let years_col = spec.rate_denominator.as_ref().map(|c| table.column_index(c)).transpose()?;
        let mut raw = Vec::with_capacity(n);
        for &i in &keep {
            let v = number(&table.rows[i][tc], i, &spec.name)?;
            let v = match (v, years_col) {
                (Some(count), Some(yc)) => {
                    if !(count >= 0.0 && count.fract() == 0.0) {
                        return Err(IngestError::BadCount { row: i, column: spec.name.clone(), value: count });
                    }
                    let years_name = spec.rate_denominator.as_deref().unwrap_or_default();
                    let years = number(&table.rows[i][yc], i, years_name)?
                        .ok_or_else(|| IngestError::MissingCell { row: i, column: years_name.to_string() })?;
                    derive_rate(count as u64, years)?
                }
                (Some(v), None) if spec.zero_as_missing && v == 0.0 => None,
                (v, _) => v,
            };
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(IngestError::NonNumeric {
                        row: i,
                        column: spec.name.clone(),
                        value: format!("{v}"),
                    });
                }
            }
            raw.push(v);
        }
        let log_err = |e: StandardizeError| match e {
            StandardizeError::NonPositive { index, value } => {
                IngestError::NonPositiveLog { row: keep[index], column: spec.name.clone(), value }
            }
            StandardizeError::Degenerate => IngestError::Degenerate(spec.name.clone()),
        };
        let (values, stats) = if spec.standardize {
            standardize(&raw, spec.transform).map_err(log_err)?
        } else {
            let t = transform_values(&raw, spec.transform).map_err(log_err)?;
            (t, StandardizationStats { transform: spec.transform, mean: 0.0, sd: 1.0 })
        };
        for (row, v) in values.iter().enumerate() {
            if let Some(v) = v {
                y[row * j + fj] = *v;
                r_mask[row * j + fj] = 1;
            }
        }
        feature_stats.push(stats);
    }

    // Binary features.
    let k = config.binary_features.len();
    let mut w = vec![0u8; n * k];
    for (fk, spec) in config.binary_features.iter().enumerate() {
        let tc = table.column_index(&spec.name)?;
        let codes = spec.code_list.as_ref().map(CodeList::resolve).transpose()?;
        for (row, &i) in keep.iter().enumerate() {
            let cell = &table.rows[i][tc];
            let value = match (&codes, cell) {
                (Some(_), Cell::Missing) => 0,
                (Some(list), Cell::Text(s)) => composite_indicator(s.split(';').map(str::trim), list),
                (Some(list), Cell::Number(v)) => composite_indicator(std::iter::once(format!("{v}").as_str()), list),
                (None, Cell::Missing) => return Err(IngestError::MissingCell { row: i, column: spec.name.clone() }),
                (None, Cell::Number(v)) if *v == 0.0 || *v == 1.0 => *v as u8,
                (None, Cell::Number(v)) => {
                    return Err(IngestError::NotBinary { row: i, column: spec.name.clone(), value: *v })
                }
                (None, Cell::Text(s)) => {
                    return Err(IngestError::NonNumeric { row: i, column: spec.name.clone(), value: s.clone() })
                }
            };
            w[row * k + fk] = value;
        }
    }

    let cohort = Cohort::new(
        ids,
        columns,
        config.continuous_features.iter().map(|f| f.name.clone()).collect(),
        config.binary_features.iter().map(|f| f.name.clone()).collect(),
        x,
        y,
        r_mask,
        w,
        feature_stats,
        covariate_stats,
    )?;
    Ok(LoadedCohort { cohort, dropped_rows })
}

#[derive(Serialize, Deserialize)]
struct NamedStats {
    name: String,
    stats: Option<StandardizationStats>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotStats {
    features: Vec<NamedStats>,
    covariates: Vec<NamedStats>,
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Writes `cohort.csv`, `mask.csv` and `stats.json` into `dir`.
pub fn write_snapshot(cohort: &Cohort, dir: &Path) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (m, j, k) = (cohort.num_covariates(), cohort.num_continuous(), cohort.num_binary());

    let path = dir.join("cohort.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["id".to_string()];
    header.extend(cohort.covariate_columns.iter().cloned());
    header.extend(cohort.continuous_names.iter().cloned());
    header.extend(cohort.binary_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..cohort.len() {
        let rec = cohort.record(i);
        let mut row = Vec::with_capacity(1 + m + j + k);
        row.push(cohort.ids[i].clone());
        row.extend(rec.x.iter().map(|&v| fmt_num(v)));
        row.extend(rec.y.iter().zip(rec.r).map(|(&v, &r)| if r == 1 { fmt_num(v) } else { String::new() }));
        row.extend(rec.w.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let path = dir.join("mask.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["id".to_string()];
    header.extend(cohort.continuous_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..cohort.len() {
        let mut row = vec![cohort.ids[i].clone()];
        row.extend(cohort.record(i).r.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let stats = SnapshotStats {
        features: cohort
            .continuous_names
            .iter()
            .zip(&cohort.feature_stats)
            .map(|(n, s)| NamedStats { name: n.clone(), stats: Some(*s) })
            .collect(),
        covariates: cohort
            .covariate_columns
            .iter()
            .zip(&cohort.covariate_stats)
            .map(|(n, s)| NamedStats { name: n.clone(), stats: *s })
            .collect(),
    };
    let path = dir.join("stats.json");
    fs::write(&path, serde_json::to_string_pretty(&stats)?).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`].
pub fn read_snapshot(dir: &Path) -> Result<Cohort, IngestError> {
    let path = dir.join("stats.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let stats: SnapshotStats = serde_json::from_str(&text)?;
    let cohort_table = RawTable::read_path(&dir.join("cohort.csv"), b',')?;
    let mask_table = RawTable::read_path(&dir.join("mask.csv"), b',')?;

    let covariate_columns: Vec<String> = stats.covariates.iter().map(|s| s.name.clone()).collect();
    let continuous_names: Vec<String> = stats.features.iter().map(|s| s.name.clone()).collect();
    let (m, j) = (covariate_columns.len(), continuous_names.len());
    let k = cohort_table.columns.len().saturating_sub(1 + m + j);
    let binary_names = cohort_table.columns[1 + m + j..].to_vec();
    let n = cohort_table.rows.len();
    let index: HashMap<&str, usize> =
        mask_table.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut ids = Vec::with_capacity(n);
    let (mut x, mut y, mut r, mut w) = (Vec::with_capacity(n * m), Vec::new(), Vec::new(), Vec::new());
    for (i, row) in cohort_table.rows.iter().enumerate() {
        ids.push(row[0].render());
        for c in 0..m {
            let name = &cohort_table.columns[1 + c];
            x.push(number(&row[1 + c], i, name)?.ok_or_else(|| IngestError::MissingCell { row: i, column: name.clone() })?);
        }
        let mask_row = mask_table.rows.get(i).ok_or(IngestError::Ragged { row: i, got: 0, expected: 1 + j })?;
        for (c, name) in continuous_names.iter().enumerate() {
            let mc = *index.get(name.as_str()).ok_or_else(|| IngestError::MissingColumn(name.clone()))?;
            let observed = number(&mask_row[mc], i, name)? == Some(1.0);
            r.push(u8::from(observed));
            y.push(number(&row[1 + m + c], i, name)?.unwrap_or(f64::NAN));
        }
        for c in 0..k {
            let name = &cohort_table.columns[1 + m + j + c];
            match number(&row[1 + m + j + c], i, name)? {
                Some(v) if v == 0.0 || v == 1.0 => w.push(v as u8),
                Some(v) => return Err(IngestError::NotBinary { row: i, column: name.clone(), value: v }),
                None => return Err(IngestError::MissingCell { row: i, column: name.clone() }),
            }
        }
    }
    Ok(Cohort::new(
        ids,
        covariate_columns,
        continuous_names,
        binary_names,
        x,
        y,
        r,
        w,
        stats.features.iter().map(|s| s.stats.unwrap_or_else(StandardizationStats::identity)).collect(),
        stats.covariates.iter().map(|s| s.stats).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rates_treat_zero_counts_as_missing() {
        assert_eq!(derive_rate(0, 3.2).unwrap(), None);
        assert_eq!(derive_rate(5, 2.0).unwrap(), Some(2.5));
        assert_eq!(derive_rate(1, 0.5).unwrap(), Some(2.0));
        assert!(matches!(derive_rate(1, 0.0), Err(IngestError::NonPositiveYears(_))));
        assert!(derive_rate(1, -1.0).is_err());
    }

    #[test]
    fn composite_indicator_cases() {
        let list = CodeList::allergy_default();
        assert_eq!(list.len(), 22);
        assert_eq!(composite_indicator(["J309"], &list), 1);
        assert_eq!(composite_indicator(std::iter::empty(), &list), 0);
        // Direct scan: the COPD code is not on the allergy list.
        assert!(!ALLERGY_CODES.contains(&"J449"));
        assert_eq!(composite_indicator(["J449"], &list), 0);
        assert_eq!(composite_indicator(["J449", "L20"], &list), 1);
    }

    #[test]
    fn code_list_rejects_bad_codes() {
        assert!(CodeList::new(Vec::<String>::new()).is_err());
        assert!(CodeList::new(["j309"]).is_err());
        assert!(CodeList::new(["J3 09"]).is_err());
    }

    #[test]
    fn standardize_symmetric_log_case() {
        let e = std::f64::consts::E;
        let (z, s) = standardize(&[Some(1.0), Some(e), Some(e * e)], Transform::Log).unwrap();
        let z: Vec<f64> = z.into_iter().map(Option::unwrap).collect();
        for (got, want) in z.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((s.mean - 1.0).abs() < 1e-12 && (s.sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_two_point_case_keeps_missing() {
        let (z, s) = standardize(&[Some(3.0), None, Some(5.0)], Transform::None).unwrap();
        let h = std::f64::consts::SQRT_2 / 2.0;
        assert!((z[0].unwrap() + h).abs() < 1e-12);
        assert_eq!(z[1], None);
        assert!((z[2].unwrap() - h).abs() < 1e-12);
        assert_eq!(s.mean, 4.0);
        assert!((s.sd - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn standardize_errors() {
        assert_eq!(standardize(&[Some(2.0), Some(2.0)], Transform::None).unwrap_err(), StandardizeError::Degenerate);
        assert_eq!(standardize(&[Some(2.0), None], Transform::None).unwrap_err(), StandardizeError::Degenerate);
        assert_eq!(
            standardize(&[Some(2.0), Some(0.0)], Transform::Log).unwrap_err(),
            StandardizeError::NonPositive { index: 1, value: 0.0 }
        );
    }

    #[test]
    fn standardize_lognormal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<Option<f64>> = (0..1000)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                Some((0.4 + 1.3 * z).exp())
            })
            .collect();
        let (z, _) = standardize(&values, Transform::Log).unwrap();
        let z: Vec<f64> = z.into_iter().flatten().collect();
        // Independent two-pass moments, with a compensated first pass.
        let n = z.len() as f64;
        let mut sum = 0.0;
        let mut comp = 0.0;
        for v in &z {
            let t = v - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
        }
        let mean = sum / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-10);

        // Standardizing again is a fixed point.
        let again: Vec<Option<f64>> = z.iter().map(|v| Some(*v)).collect();
        let (zz, s2) = standardize(&again, Transform::None).unwrap();
        assert!(s2.mean.abs() < 1e-12 && (s2.sd - 1.0).abs() < 1e-12);
        for (a, b) in zz.iter().zip(&z) {
            assert!((a.unwrap() - b).abs() < 1e-12);
        }
    }

    fn n01() -> PriorSpec {
        PriorSpec::normal(0.0, 1.0)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            covariates: vec![
                CovariateSpec::numeric("age", true),
                CovariateSpec::categorical("sex", &["female", "male"], "female"),
            ],
            continuous_features: vec![
                ContinuousFeatureSpec {
                    name: "eos".into(),
                    transform: Transform::Log,
                    standardize: true,
                    zero_as_missing: false,
                    rate_denominator: None,
                    outcome_prior: ClassEffectPrior { intercept: n01(), class_effect: n01() },
                    scale_prior: PriorSpec::truncated(1.0, 0.1, Some(0.0.into()), None),
                    missingness_prior: MissingnessPrior {
                        intercept: n01(),
                        covariates: PriorList::Shared(n01()),
                        class_effect: n01(),
                    },
                },
                ContinuousFeatureSpec {
                    name: "enc".into(),
                    transform: Transform::Log,
                    standardize: true,
                    zero_as_missing: true,
                    rate_denominator: Some("years".into()),
                    outcome_prior: ClassEffectPrior { intercept: n01(), class_effect: n01() },
                    scale_prior: PriorSpec::truncated(1.0, 0.1, Some(0.0.into()), None),
                    missingness_prior: MissingnessPrior {
                        intercept: n01(),
                        covariates: PriorList::Shared(n01()),
                        class_effect: n01(),
                    },
                },
            ],
            binary_features: vec![
                BinaryFeatureSpec {
                    name: "ics".into(),
                    prior: ClassEffectPrior { intercept: n01(), class_effect: n01() },
                    code_list: None,
                },
                BinaryFeatureSpec {
                    name: "codes".into(),
                    prior: ClassEffectPrior { intercept: n01(), class_effect: n01() },
                    code_list: Some(CodeListRef::Named("allergy".into())),
                },
            ],
            latent_prior: RegressionPrior { intercept: n01(), covariates: PriorList::Shared(n01()) },
            sampler_defaults: SamplerDefaults::default(),
        }
    }

    const SMALL: &str = "id,age,sex,eos,enc,years,ics,codes
p1,30,female,0.2,4,2,1,J309;J449
p2,50,male,,0,3,0,
p3,40,male,0.4,NA,1,1,J449
p4,60,female,0.1,2,4,0,L20
";

    #[test]
    fn load_encodes_mask_rates_and_codes() {
        let t = RawTable::read(SMALL.as_bytes(), b',').unwrap();
        let loaded = load_cohort(&t, &small_config(), &LoadOptions::default()).unwrap();
        let c = loaded.cohort;
        assert_eq!(c.len(), 4);
        assert_eq!(c.ids, ["p1", "p2", "p3", "p4"]);
        assert_eq!(c.covariate_columns, ["age", "sex[male]"]);
        let sex: Vec<f64> = (0..4).map(|i| c.record(i).x[1]).collect();
        assert_eq!(sex, [0.0, 1.0, 1.0, 0.0]);
        let eos_mask: Vec<u8> = (0..4).map(|i| c.record(i).r[0]).collect();
        assert_eq!(eos_mask, [1, 0, 1, 1]);
        // Zero counts and NA counts are both unobserved.
        let enc_mask: Vec<u8> = (0..4).map(|i| c.record(i).r[1]).collect();
        assert_eq!(enc_mask, [1, 0, 0, 1]);
        // enc rates are 2.0 and 0.5 → log scale ±ln 2 → z = ±1/√2
        let h = std::f64::consts::SQRT_2 / 2.0;
        assert!((c.record(0).y[1] - h).abs() < 1e-12);
        assert!((c.record(3).y[1] + h).abs() < 1e-12);
        let codes: Vec<u8> = (0..4).map(|i| c.record(i).w[1]).collect();
        assert_eq!(codes, [1, 0, 0, 1]);
        assert!(c.record(1).y[0].is_nan());
    }

    #[test]
    fn fully_observed_column_has_full_mask() {
        let t = RawTable::read("id,age,sex,eos,enc,years,ics,codes\n1,1,male,1,1,1,0,\n2,2,female,2,2,1,1,\n".as_bytes(), b',')
            .unwrap();
        let c = load_cohort(&t, &small_config(), &LoadOptions::default()).unwrap().cohort;
        assert!(c.r.iter().all(|&v| v == 1));
    }

    #[test]
    fn load_errors_identify_row_and_column() {
        let bad_level = SMALL.replace("p2,50,male", "p2,50,unknown");
        let t = RawTable::read(bad_level.as_bytes(), b',').unwrap();
        match load_cohort(&t, &small_config(), &LoadOptions::default()) {
            Err(IngestError::UnknownLevel { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (1, "sex", "unknown"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let missing_binary = SMALL.replace("p3,40,male,0.4,NA,1,1", "p3,40,male,0.4,NA,1,");
        let t = RawTable::read(missing_binary.as_bytes(), b',').unwrap();
        assert!(matches!(
            load_cohort(&t, &small_config(), &LoadOptions::default()),
            Err(IngestError::MissingCell { row: 2, .. })
        ));

        let text = SMALL.replace("p1,30", "p1,thirty");
        let t = RawTable::read(text.as_bytes(), b',').unwrap();
        assert!(matches!(
            load_cohort(&t, &small_config(), &LoadOptions::default()),
            Err(IngestError::NonNumeric { row: 0, .. })
        ));

        let nonpos = SMALL.replace("p4,60,female,0.1", "p4,60,female,-0.1");
        let t = RawTable::read(nonpos.as_bytes(), b',').unwrap();
        assert!(matches!(
            load_cohort(&t, &small_config(), &LoadOptions::default()),
            Err(IngestError::NonPositiveLog { row: 3, .. })
        ));
    }

    #[test]
    fn covariate_prefilter_is_opt_in() {
        let gap = SMALL.replace("p2,50,male", "p2,,male");
        let t = RawTable::read(gap.as_bytes(), b',').unwrap();
        assert!(load_cohort(&t, &small_config(), &LoadOptions::default()).is_err());
        let opts = LoadOptions { drop_incomplete_covariates: true, ..LoadOptions::default() };
        let loaded = load_cohort(&t, &small_config(), &opts).unwrap();
        assert_eq!(loaded.dropped_rows, [1]);
        assert_eq!(loaded.cohort.len(), 3);
    }

    #[test]
    fn never_drops_rows_by_default() {
        let t = RawTable::read(SMALL.as_bytes(), b',').unwrap();
        let loaded = load_cohort(&t, &small_config(), &LoadOptions::default()).unwrap();
        assert_eq!(loaded.cohort.len(), t.rows.len());
        assert!(loaded.dropped_rows.is_empty());
    }

    #[test]
    fn snapshot_round_trip() {
        let t = RawTable::read(SMALL.as_bytes(), b',').unwrap();
        let c = load_cohort(&t, &small_config(), &LoadOptions::default()).unwrap().cohort;
        let dir = tempfile::tempdir().unwrap();
        write_snapshot(&c, dir.path()).unwrap();
        let back = read_snapshot(dir.path()).unwrap();
        assert_eq!(back.x, c.x);
        assert_eq!(back.r, c.r);
        assert_eq!(back.w, c.w);
        assert_eq!(back.feature_stats, c.feature_stats);
        assert_eq!(back.covariate_stats, c.covariate_stats);
        for (a, b) in back.y.iter().zip(&c.y) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn ragged_and_duplicate_tables_fail() {
        assert!(matches!(RawTable::read("a,a\n1,2\n".as_bytes(), b','), Err(IngestError::DuplicateHeader(_))));
        assert!(matches!(RawTable::read("a,b\n1\n".as_bytes(), b','), Err(IngestError::Ragged { .. })));
        let t = RawTable::read("a\tb\n1\tNA\n".as_bytes(), b'\t').unwrap();
        assert_eq!(t.rows[0], vec![Cell::Number(1.0), Cell::Missing]);
    }
}
