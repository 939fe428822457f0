//! Persistence: plain numeric CSV tables, a JSON report per experiment,
//! and a run manifest per invocation.
//!
//! Determinism contract: identical config and seed produce byte-identical
//! files. Floats are written with the shortest round-trip formatting,
//! tables are written in construction order, and manifests carry no
//! timestamps or host identifiers.

use anyhow::{Context, Result};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One numeric table destined for `<name>.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// A checked quantity with its uncertainty and declared tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct Finding {
    pub label: String,
    pub value: f64,
    pub uncertainty: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Finding {
    pub fn line(&self) -> String {
        format!(
            "{}: value {:.6} (se {:.3e}) target {:.6} tol {:.3e} -> {}",
            self.label,
            self.value,
            self.uncertainty,
            self.target,
            self.tolerance,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub tables: Vec<Table>,
    pub findings: Vec<Finding>,
    /// Free-form context lines (parameter values used, per-N notes).
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: &str) -> Self {
        ExperimentReport {
            name: name.to_string(),
            tables: Vec::new(),
            findings: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.findings.iter().all(|f| f.pass)
    }
}

/// Invocation record: resolved configuration, seeds, version. No clock.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, master_seed: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).context("serializing config echo")?,
            master_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = Vec::with_capacity(rows.len() * 32 + 64);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(b',');
            }
            write!(out, "{v}")?;
            first = false;
        }
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = dir.join("run_manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Writes every table as CSV plus `report.json`; returns the file paths.
/// The directory is created here, after all computation succeeded, so a
/// failed run leaves nothing behind.
pub fn persist_report(
    dir: &Path,
    manifest: &RunManifest,
    report: &ExperimentReport,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for table in &report.tables {
        let path = dir.join(format!("{}.csv", table.name));
        write_csv(&path, &table.header, &table.rows)?;
        written.push(path);
    }
    let report_path = dir.join("report.json");
    let body = serde_json::json!({
        "name": report.name,
        "findings": report.findings,
        "notes": report.notes,
        "config": manifest.config,
        "master_seed": manifest.master_seed,
        "version": manifest.version,
    });
    fs::write(&report_path, serde_json::to_string_pretty(&body)? + "\n")?;
    written.push(report_path);
    written.push(write_manifest(dir, manifest)?);
    Ok(written)
}
