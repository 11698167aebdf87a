//! Artifacts produced by a scenario and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Files a scenario wants written, in order, plus its summary and verdict.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Value,
    /// A checked bound was violated more often than its threshold allows.
    pub violated: bool,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json(&mut self, name: impl Into<String>, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }
}

/// Long-format metric rows: scenario-specific key columns followed by
/// `metric,value,stderr,bound,ratio`. Missing entries are left empty.
pub struct MetricTable {
    keys: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

pub struct Metric {
    pub name: &'static str,
    pub value: f64,
    pub stderr: Option<f64>,
    pub bound: Option<f64>,
    pub ratio: Option<f64>,
}

impl Metric {
    pub fn plain(name: &'static str, value: f64) -> Self {
        Metric { name, value, stderr: None, bound: None, ratio: None }
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

impl MetricTable {
    pub fn new(keys: &[&'static str]) -> Self {
        MetricTable { keys: keys.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, key: &[String], m: Metric) {
        assert_eq!(key.len(), self.keys.len(), "key arity");
        let mut row = key.to_vec();
        row.extend([m.name.to_string(), num(m.value), opt(m.stderr), opt(m.bound), opt(m.ratio)]);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.keys.clone();
        header.extend(["metric", "value", "stderr", "bound", "ratio"]);
        w.write_record(&header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub schema_version: u32,
    pub spec_sha256: String,
    pub seed: u64,
    pub versions: Versions,
    pub parallel: bool,
    pub wall_time_seconds: f64,
    pub verdict: &'static str,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub lab: &'static str,
    pub mdlab: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Versions { lab: env!("CARGO_PKG_VERSION"), mdlab: mdlab::VERSION }
    }
}

/// Write every artifact under `dir` and return their manifest entries.
pub fn write_all(dir: &Path, artifacts: &Artifacts) -> Result<Vec<FileEntry>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::new();
    for (name, bytes) in &artifacts.files {
        let path: PathBuf = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        entries.push(FileEntry { name: name.clone(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_table_layout() {
        let mut t = MetricTable::new(&["dim"]);
        t.push(&["8".into()], Metric { name: "loss", value: 0.5, stderr: Some(0.01), bound: None, ratio: None });
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(text, "dim,metric,value,stderr,bound,ratio\n8,loss,5e-1,1e-2,,\n");
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
