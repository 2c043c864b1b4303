//! Deterministic run artifacts: CSV and JSON writers, SHA-256 content
//! digests, and the run manifest that ties a directory of outputs back to
//! the exact configuration and seed that produced them.
//!
//! Conventions: CSV is comma-separated with a header row and `.` decimal
//! points (Rust's shortest round-trip float formatting, locale-free); JSON
//! is UTF-8 with key order fixed by struct declaration order. The manifest
//! is always written last, so a complete manifest implies complete
//! artifacts.

use crate::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct ManifestFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Canonical config text; parsing it reproduces the run.
    pub config_snapshot: String,
    pub files: Vec<ManifestFile>,
}

/// Collects artifacts under one output directory, refusing to write
/// anywhere else, and finishes by writing the manifest.
pub struct OutputWriter {
    out_dir: PathBuf,
    files: Vec<ManifestFile>,
    started_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl OutputWriter {
    pub fn create(out_dir: &Path) -> Result<OutputWriter> {
        std::fs::create_dir_all(out_dir)?;
        Ok(OutputWriter {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
            started_unix: unix_now(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Validate that `name` stays inside the output directory: a plain
    /// relative file name, no parent traversal, no absolute paths.
    fn resolve(&self, name: &str) -> Result<PathBuf> {
        let rel = Path::new(name);
        if rel.is_absolute()
            || rel.components().any(|c| matches!(c, std::path::Component::ParentDir))
            || name.is_empty()
        {
            return Err(Error::InvalidArgument(format!(
                "artifact name '{name}' would escape the output directory"
            )));
        }
        Ok(self.out_dir.join(rel))
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.resolve(name)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        self.files.push(ManifestFile {
            path: name.to_string(),
            sha256: format!("{:x}", hasher.finalize()),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Serialize `value` as pretty JSON (struct-declaration key order) and
    /// record it.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.record(name, text.as_bytes())
    }

    /// Write a CSV artifact: one header row, then data rows. Every row
    /// must match the header width.
    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            if row.len() != header.len() {
                return Err(Error::InvalidArgument(format!(
                    "CSV row width {} does not match header width {} in '{name}'",
                    row.len(),
                    header.len()
                )));
            }
            w.write_record(row)?;
        }
        let bytes =
            w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))?;
        self.record(name, &bytes)
    }

    /// Write the manifest (always last) and return it.
    pub fn finish(
        mut self,
        subcommand: &str,
        seed: u64,
        config_snapshot: &str,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            artifact_version: ARTIFACT_VERSION.to_string(),
            subcommand: subcommand.to_string(),
            seed,
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            config_snapshot: config_snapshot.to_string(),
            files: std::mem::take(&mut self.files),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.out_dir.join(MANIFEST_NAME);
        std::fs::write(path, text.as_bytes())?;
        Ok(manifest)
    }
}

/// Shortest round-trip decimal text for a float (always with `.` decimal
/// separator); the single formatting used in every CSV cell.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}
