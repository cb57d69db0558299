//! Embedding export.
//!
//! Little-endian layout: magic `CGHEMB1\0`, `u64` row count, `u32` dim, then
//! per row a `u64` id, an `i64` label and `dim` `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{CghError, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"CGHEMB1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub ids: Vec<u64>,
    pub labels: Vec<i64>,
    pub vectors: Array2<f32>,
}

pub fn write_embeddings(path: &Path, ids: &[u64], labels: &[i64], vectors: ArrayView2<f32>) -> Result<()> {
    if ids.len() != vectors.nrows() || labels.len() != vectors.nrows() {
        return Err(CghError::Shape("ids, labels and vectors must have one entry per row".into()));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(vectors.nrows() as u64).to_le_bytes())?;
        w.write_all(&(vectors.ncols() as u32).to_le_bytes())?;
        for ((id, label), row) in ids.iter().zip(labels).zip(vectors.rows()) {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&label.to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path)?;
    let bad = || CghError::Eval(format!("{} is not an embedding file", path.display()));
    if bytes.len() < 20 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad());
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let stride = 16 + 4 * dim;
    if bytes.len() != 20 + rows * stride {
        return Err(bad());
    }
    let mut ids = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for rec in bytes[20..].chunks_exact(stride) {
        ids.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
        labels.push(i64::from_le_bytes(rec[8..16].try_into().unwrap()));
        data.extend(rec[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
    }
    let vectors = Array2::from_shape_vec((rows, dim), data).map_err(|_| bad())?;
    Ok(EmbeddingFile { ids, labels, vectors })
}
