//! Table and trace emission.

use std::fs;
use std::path::{Path, PathBuf};

use super::HarnessError;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// A CSV table rendered with a `#` comment preamble.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, config_hash: &str, seed: Option<u64>) -> Result<String, HarnessError> {
        let mut out = format!("# tool: {TOOL_VERSION}\n# config_sha256: {config_hash}\n");
        match seed {
            Some(s) => out.push_str(&format!("# seed: {s}\n")),
            None => out.push_str("# seed: none\n"),
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(internal)?;
        for r in &self.rows {
            w.write_record(r).map_err(internal)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Internal(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| HarnessError::Internal(e.to_string()))?);
        Ok(out)
    }
}

fn internal(e: csv::Error) -> HarnessError {
    HarnessError::Internal(e.to_string())
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Read back the data rows of a rendered table, skipping the preamble.
pub fn parse_table(text: &str) -> Result<Table, HarnessError> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r
        .headers()
        .map_err(internal)?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(internal)?.iter().map(String::from).collect());
    }
    Ok(Table { header, rows })
}
