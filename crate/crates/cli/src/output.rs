//! CSV records and JSON summaries, written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{HarnessError, Result};

/// Column order of every results CSV.
pub const COLUMNS: [&str; 19] = [
    "kind",
    "N",
    "Lambda",
    "t",
    "beta_a",
    "beta_b",
    "beta_c",
    "beta",
    "beta2",
    "tr_dist_10",
    "tr_dist_01",
    "sobolev_dist",
    "mean_boson",
    "dbeta_a_dt",
    "dbeta_b_dt",
    "dbeta_c_dt",
    "energy",
    "C_fit",
    "walltime_s",
];

/// One CSV row. Fields that do not apply to a run kind are left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Record {
    pub kind: &'static str,
    #[serde(rename = "N")]
    pub particles: Option<usize>,
    #[serde(rename = "Lambda")]
    pub cutoff: f64,
    pub t: f64,
    pub beta_a: Option<f64>,
    pub beta_b: Option<f64>,
    pub beta_c: Option<f64>,
    pub beta: Option<f64>,
    pub beta2: Option<f64>,
    pub tr_dist_10: Option<f64>,
    pub tr_dist_01: Option<f64>,
    pub sobolev_dist: Option<f64>,
    pub mean_boson: Option<f64>,
    pub dbeta_a_dt: Option<f64>,
    pub dbeta_b_dt: Option<f64>,
    pub dbeta_c_dt: Option<f64>,
    pub energy: Option<f64>,
    #[serde(rename = "C_fit")]
    pub c_fit: Option<f64>,
    pub walltime_s: Option<f64>,
}

pub fn csv_bytes(records: &[Record]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| csv_err(e.into_error().into()))
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Io {
        path: PathBuf::from("<csv>"),
        source: std::io::Error::other(e),
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| HarnessError::Io {
        path: PathBuf::from("<json>"),
        source: std::io::Error::other(e),
    })?;
    out.push(b'\n');
    Ok(out)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HarnessError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| HarnessError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

/// Path of the JSON summary that accompanies a CSV.
pub fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Renders everything first, then writes the CSV and the summary; a render
/// failure leaves neither target touched.
pub fn emit<T: Serialize>(csv_path: &Path, records: &[Record], summary: &T) -> Result<()> {
    let csv = csv_bytes(records)?;
    let json = json_bytes(summary)?;
    write_atomic(csv_path, &csv)?;
    write_atomic(&summary_path(csv_path), &json)
}
