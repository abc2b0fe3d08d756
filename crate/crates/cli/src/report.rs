//! Run manifests and report files.
//!
//! Every JSON report has the shape
//!
//! ```text
//! { "schema_version": 1, "manifest": { ... }, "result": { ... } }
//! ```
//!
//! Numeric fields depend only on the command line and the input files;
//! `wall_time_secs` is the only field that varies between identical runs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of every setting that affects numbers.
    pub config_hash: String,
    /// SHA-256 of the input data file, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_hash: Option<String>,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    schema_version: u32,
    manifest: &'a Manifest,
    result: &'a T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the JSON form of `config`. Struct fields serialize in declaration
/// order, so the encoding is canonical for a given binary.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

pub fn manifest(command: &str, config_hash: String, data_hash: Option<String>, seed: u64) -> Manifest {
    Manifest {
        command: command.to_string(),
        config_hash,
        data_hash,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: qspec::par::current_threads(),
        wall_time_secs: 0.0,
        warnings: Vec::new(),
    }
}

/// Writes the JSON report to `out`, or to stdout when `out` is `None`.
pub fn emit<T: Serialize>(manifest: &Manifest, result: &T, out: Option<&Path>) -> Result<()> {
    let report = Report {
        schema_version: SCHEMA_VERSION,
        manifest,
        result,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn write_table(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
