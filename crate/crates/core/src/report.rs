//! Metrics files: header-first CSV tables and JSON reports that echo the
//! configuration and fingerprint every input file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), ReportError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(path)),
        _ => Ok(()),
    }
}

/// Writes `header` then one line per row; an empty `rows` gives a
/// header-only file.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), ReportError> {
    ensure_parent(path)?;
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Git blob id computed with SHA-256: `sha256("blob <len>\0" ‖ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub blob: String,
}

pub fn digest_file(path: &Path) -> Result<InputDigest, ReportError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        blob: blob_hash(&bytes),
    })
}

/// Hash over the input contents in order; independent of file names.
pub fn inputs_hash(inputs: &[InputDigest]) -> String {
    let mut h = Sha256::new();
    for i in inputs {
        h.update(i.blob.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub inputs: Vec<InputDigest>,
    pub inputs_hash: String,
    pub result: &'a T,
}

impl<'a, T: Serialize> Report<'a, T> {
    pub fn new(command: &'a str, config: &'a RunConfig, input_paths: &[&Path], result: &'a T) -> Result<Self, ReportError> {
        let inputs = input_paths.iter().map(|p| digest_file(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            command,
            config,
            inputs_hash: inputs_hash(&inputs),
            inputs,
            result,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        ensure_parent(path)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(text.as_bytes()).map_err(io_err(path))
    }
}
