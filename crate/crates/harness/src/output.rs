//! Result files: a CSV table, a JSON manifest embedding the resolved config
//! and content hashes, and a small plot descriptor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "lensmimo-run";

/// A CSV table held as formatted strings. Floats use Rust's shortest
/// round-trip formatting, so equal numbers give equal bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| HarnessError::Config(format!("csv buffer: {e}")))
    }

    /// Column values by header name.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub kind: String,
    pub x: String,
    pub y: String,
    pub series: String,
    pub error: Option<String>,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub csv_schema_version: u32,
    pub experiment: String,
    pub csv_file: String,
    pub columns: Vec<String>,
    pub csv_sha256: String,
    pub config_sha256: String,
    /// Resolved config as a TOML document; feeding it back reproduces the run.
    pub config_toml: String,
    pub seeds: Seeds,
    pub tool_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub test: u64,
    pub agent: u64,
    pub unfold: u64,
    pub robustness: u64,
    pub random_select: u64,
}

impl Seeds {
    pub fn of(cfg: &RunConfig) -> Self {
        Seeds {
            train: cfg.data.train_seed,
            test: cfg.data.test_seed,
            agent: cfg.agent.seed,
            unfold: cfg.unfold.train.seed,
            robustness: cfg.robustness.seed,
            random_select: cfg.solvers.random_seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub plot: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Writes `<output_dir>/<name>_<experiment>.{csv,json,plot.json}`.
pub fn write_outputs(cfg: &RunConfig, experiment: &str, table: &Table, plot: &PlotSpec) -> Result<Artifacts> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let stem = format!("{}_{experiment}", cfg.name);
    let csv_path = dir.join(format!("{stem}.csv"));
    let bytes = table.to_csv_bytes()?;
    write(&csv_path, &bytes)?;
    let config_toml = cfg.to_toml_string();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        csv_schema_version: CSV_SCHEMA_VERSION,
        experiment: experiment.into(),
        csv_file: format!("{stem}.csv"),
        columns: table.header.clone(),
        csv_sha256: sha256_hex(&bytes),
        config_sha256: sha256_hex(config_toml.as_bytes()),
        config_toml,
        seeds: Seeds::of(cfg),
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    write(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    let plot_path = dir.join(format!("{stem}.plot.json"));
    write(&plot_path, &serde_json::to_vec_pretty(&serde_json::json!({ "csv": manifest.csv_file, "plot": plot }))?)?;
    Ok(Artifacts { csv: csv_path, manifest: manifest_path, plot: plot_path })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format != MANIFEST_FORMAT {
        return Err(HarnessError::Config(format!("{} is not a run manifest", path.display())));
    }
    Ok(m)
}

/// Formats a float with the shortest representation that round-trips.
pub fn f(x: f64) -> String {
    format!("{x}")
}
