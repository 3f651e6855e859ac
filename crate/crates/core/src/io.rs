//! Binary columnar files and run fingerprints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then every column as `rows` little-endian `f64` values, column-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SDCOLS01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnHeader {
    pub columns: Vec<String>,
    pub rows: usize,
    pub fingerprint: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Hex SHA-256 of arbitrary bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn write_columns(path: &Path, header: &ColumnHeader, columns: &[Vec<f64>]) -> Result<()> {
    if columns.len() != header.columns.len() {
        return Err(Error::InvalidInput(format!(
            "{} column names for {} columns",
            header.columns.len(),
            columns.len()
        )));
    }
    if let Some(c) = columns.iter().position(|c| c.len() != header.rows) {
        return Err(Error::InvalidInput(format!("column {} has the wrong length", header.columns[c])));
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for col in columns {
        for v in col {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_columns(path: &Path) -> Result<(ColumnHeader, Vec<Vec<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "truncated magic"))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| format_err(path, "truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(format_err(path, "header too large"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| format_err(path, "truncated header"))?;
    let header: ColumnHeader = serde_json::from_slice(&json).map_err(|e| format_err(path, e.to_string()))?;
    let mut columns = Vec::with_capacity(header.columns.len());
    let mut buf = vec![0u8; header.rows * 8];
    for name in &header.columns {
        r.read_exact(&mut buf)
            .map_err(|_| format_err(path, format!("truncated column {name}")))?;
        columns.push(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok((header, columns))
}
