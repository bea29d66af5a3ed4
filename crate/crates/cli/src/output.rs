//! File formats: fixed-precision CSV tables, JSON documents and the run
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// 17 significant digits in scientific notation.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Collects the artifacts of one run inside its output directory.
#[derive(Debug)]
pub struct Sink {
    dir: PathBuf,
    files: Vec<String>,
}

impl Sink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    /// Writes a numeric table with `'\n'` line endings.
    pub fn csv<I, H: AsRef<[u8]>>(&mut self, name: &str, header: &[H], rows: I) -> Result<()>
    where
        I: IntoIterator,
        I::Item: AsRef<[f64]>,
    {
        self.csv_rows(name, header, rows.into_iter().map(|r| r.as_ref().iter().map(|v| num(*v)).collect()))
    }

    /// Table of preformatted cells.
    pub fn csv_rows<I, H: AsRef<[u8]>>(&mut self, name: &str, header: &[H], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for rec in rows {
            w.write_record(&rec)?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.record(name);
        Ok(())
    }
}

/// Reads a numeric CSV written by [`Sink::csv`], dropping the header and
/// the first `skip` columns of every row.
pub fn read_table(path: &Path, skip: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(skip)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub item: String,
    pub converged: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: String,
    pub tool_version: String,
    /// SHA-256 of the canonical configuration.
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub files: Vec<String>,
    pub statuses: Vec<Status>,
}

impl RunManifest {
    pub fn converged(&self) -> bool {
        self.statuses.iter().all(|s| s.converged)
    }

    /// `0` when everything converged, `2` otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.converged() {
            0
        } else {
            2
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}
