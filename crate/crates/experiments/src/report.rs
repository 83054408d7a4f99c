//! CSV result tables. Each file starts with `#` comment lines carrying the
//! schema version, the config hash and the seed; wall-clock columns are
//! listed so that reproducibility checks can skip them.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            // Debug formatting round-trips every bit of the value.
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Text(v) => write!(f, "{v}"),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    /// Wall-clock measurement, excluded from reproducibility checks.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    /// Free-form `key: value` notes written into the header.
    pub notes: Vec<String>,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: &str, config_hash: &str, seed: u64, columns: &[&str], timing: &[&str]) -> Self {
        assert!(timing.iter().all(|t| columns.contains(t)), "timing columns must be columns");
        Self {
            name: name.to_owned(),
            config_hash: config_hash.to_owned(),
            seed,
            notes: Vec::new(),
            columns: columns
                .iter()
                .map(|c| Column {
                    name: (*c).to_owned(),
                    timing: timing.contains(c),
                })
                .collect(),
            rows: Vec::new(),
        }
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width of table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Rows with the timing columns removed.
    pub fn reproducible_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&self.columns)
                    .filter(|(_, c)| !c.timing)
                    .map(|(v, _)| v.to_string())
                    .collect()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), csv::Error> {
        writeln!(out, "# table: {}", self.name)?;
        writeln!(out, "# schema_version: {SCHEMA_VERSION}")?;
        writeln!(out, "# config_sha256: {}", self.config_hash)?;
        writeln!(out, "# seed: {}", self.seed)?;
        let timing: Vec<&str> = self.columns.iter().filter(|c| c.timing).map(|c| c.name.as_str()).collect();
        writeln!(out, "# timing_columns: {}", timing.join(" "))?;
        for n in &self.notes {
            writeln!(out, "# {n}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf, csv::Error> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", self.name));
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        Ok(path)
    }
}

/// Reads a CSV written by [`Table::write_csv`] and returns the header and
/// the rows with timing columns dropped.
pub fn read_reproducible<R: BufRead>(input: R) -> Result<(Vec<String>, Vec<Vec<String>>), csv::Error> {
    let mut timing = Vec::new();
    let mut body = String::new();
    for line in input.lines() {
        let line = line?;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(cols) = comment.trim().strip_prefix("timing_columns:") {
                timing = cols.split_whitespace().map(str::to_owned).collect();
            }
        } else {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let keep: Vec<bool> = header.iter().map(|h| !timing.contains(h)).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| v.to_owned()).collect());
    }
    let header = header.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(h, _)| h).collect();
    Ok((header, rows))
}
