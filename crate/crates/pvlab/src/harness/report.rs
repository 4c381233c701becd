//! Report emission: RFC-4180 CSV tables and the run manifest. Outputs are a
//! pure function of their inputs — no timestamps, no environment leakage — so
//! reruns with identical configs produce byte-identical files.

use super::Result;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Minimal RFC-4180 writer: CRLF row endings, quoting only when needed.
pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut w = CsvWriter { buf: String::new(), columns: header.len() };
        w.row(header);
        w
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        assert_eq!(fields.len(), self.columns, "csv row width mismatch");
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push_str(&quote(f.as_ref()));
        }
        self.buf.push_str("\r\n");
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.buf)?;
        Ok(())
    }
}

fn quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Format a float for CSV: shortest representation that round-trips.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// The run manifest: config hash, seeds, stage artifact hashes, and the list
/// of emitted files. Plain `key: value` lines, sorted by insertion.
#[derive(Debug, Default, Clone)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Everything a pipeline run produced.
#[derive(Debug, Default)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    /// Emitted artifact paths (CSV, SVG) in emission order.
    pub artifacts: Vec<PathBuf>,
    /// Headline numbers for quick inspection: (name, value).
    pub summary: Vec<(String, f64)>,
    /// Stages that failed, with their error text (completed stages persist).
    pub failures: Vec<(String, String)>,
}

impl ExperimentReport {
    pub fn push_artifact(&mut self, p: PathBuf) {
        self.artifacts.push(p);
    }

    pub fn summary_value(&self, name: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}
