use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Fixed-precision number or `n/a`.
pub fn fmt_opt(value: Option<f64>, decimals: usize) -> String {
    match value {
        Some(v) if v.is_finite() => format!("{v:.decimals$}"),
        _ => "n/a".to_string(),
    }
}

/// Signed fixed-precision number (`+2.04`, `-31.8`) or `n/a`.
pub fn fmt_pct(value: Option<f64>, decimals: usize) -> String {
    match value {
        Some(v) if v.is_finite() => {
            let s = format!("{v:+.decimals$}");
            if s.trim_start_matches(['+', '-']).chars().all(|c| c == '0' || c == '.') {
                s.replacen('-', "+", 1)
            } else {
                s
            }
        }
        _ => "n/a".to_string(),
    }
}

/// A header row plus string cells, written as CSV.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: ToString>(headers: &[S]) -> Self {
        Table { headers: headers.iter().map(ToString::to_string).collect(), rows: Vec::new() }
    }

    pub fn push<S: ToString>(&mut self, row: &[S]) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(Error::invalid(format!("row of {} cells for {} columns", row.len(), self.headers.len())));
        }
        self.rows.push(row.iter().map(ToString::to_string).collect());
        Ok(())
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv())
    }

    pub fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
        let headers = r.headers().map_err(|e| Error::parse(path, e))?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| Error::parse(path, e))?.iter().map(String::from).collect());
        }
        Ok(Table { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}
