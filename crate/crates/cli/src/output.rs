//! Diagnostics CSV and run manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use cbf_core::diagnostics::{csv_header, DiagnosticsRecord};
use cbf_core::flow::Termination;
use serde::Serialize;

pub const CSV_NAME: &str = "diagnostics.csv";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Append-only diagnostics log, flushed after every row.
pub struct CsvLog {
    out: BufWriter<File>,
    pub rows: usize,
}

impl CsvLog {
    pub fn create(path: &Path, m_max: usize) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", csv_header(m_max))?;
        out.flush()?;
        Ok(Self { out, rows: 0 })
    }

    /// Keeps the header and the rows with `step <= last_step` of an existing log (if any)
    /// and continues appending after them.
    pub fn resume(path: &Path, m_max: usize, last_step: usize) -> std::io::Result<Self> {
        if !path.exists() {
            return Self::create(path, m_max);
        }
        let header = csv_header(m_max);
        let mut kept = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != header {
                    return Err(std::io::Error::other(format!("{}: header does not match m_max", path.display())));
                }
                continue;
            }
            let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).ok_or_else(|| {
                std::io::Error::other(format!("{}:{}: malformed row", path.display(), i + 1))
            })?;
            if step <= last_step {
                kept.push(line);
            }
        }
        let mut log = Self::create(path, m_max)?;
        for line in &kept {
            writeln!(log.out, "{line}")?;
        }
        log.out.flush()?;
        log.rows = kept.len();
        Ok(log)
    }

    pub fn write(&mut self, record: &DiagnosticsRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record.csv_row())?;
        self.out.flush()?;
        self.rows += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    pub s0: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Summary of one command, written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Default)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// The effective configuration, as TOML.
    pub config: String,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<ProjectionReport>,
    pub s0: Option<f64>,
    pub termination: Option<Termination>,
    pub error: Option<ErrorReport>,
    pub start_step: usize,
    pub final_step: usize,
    pub final_t: f64,
    pub records: usize,
    pub checkpoints: Vec<String>,
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_NAME), text + "\n")
    }
}
