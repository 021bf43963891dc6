//! Embedding files.
//!
//! Layout: the magic `SSEMBED1`, u32 count, u32 dim (must be 512), then
//! `count * dim` little-endian f32 values, then one UTF-8 label per line.

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::query::Embedding;
use crate::EMBEDDING_DIM;

const MAGIC: &[u8; 8] = b"SSEMBED1";
const CTX: &str = "embedding file";
const NORM_WARN_TOL: f64 = 1e-2;

pub(crate) fn encode_vector(w: &mut Writer, v: &[f64]) {
    for x in v {
        w.f32(*x as f32);
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, embeddings: &[Embedding]) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(embeddings.len() as u32);
    w.u32(EMBEDDING_DIM as u32);
    for e in embeddings {
        if e.vector.len() != EMBEDDING_DIM {
            return Err(Error::validation(format!(
                "embedding {:?} has {} dims",
                e.label,
                e.vector.len()
            )));
        }
        if e.label.contains('\n') {
            return Err(Error::validation(format!("label {:?} contains a newline", e.label)));
        }
        encode_vector(&mut w, &e.vector);
    }
    for e in embeddings {
        w.buf.extend_from_slice(e.label.as_bytes());
        w.buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &w.buf)
}

/// Renormalizes a stored vector; returns an error for zero or non-finite
/// input and warns when the stored norm was noticeably off.
pub(crate) fn unit_vector(raw: Vec<f64>, label: &str) -> Result<Embedding> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_WARN_TOL && norm > 0.0 && norm.is_finite() {
        warn!("embedding {label:?} had norm {norm}; renormalized");
    }
    Embedding::normalized(raw, label)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Embedding>> {
    let mut r = Reader::new(bytes, CTX);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::parse(CTX, "bad magic"));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim != EMBEDDING_DIM {
        return Err(Error::validation(format!(
            "embedding file declares {dim} dims, expected {EMBEDDING_DIM}"
        )));
    }
    if count.saturating_mul(dim * 4) > r.remaining() {
        return Err(Error::parse(CTX, format!("truncated: {count} vectors declared")));
    }
    let vectors = (0..count)
        .map(|_| (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let text = std::str::from_utf8(r.rest()).map_err(|_| Error::parse(CTX, "labels are not UTF-8"))?;
    let labels: Vec<&str> = text.split_terminator('\n').collect();
    if labels.len() != count {
        return Err(Error::parse(
            CTX,
            format!("{} labels for {count} vectors", labels.len()),
        ));
    }
    vectors
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (v, l))| {
            unit_vector(v, l).map_err(|e| Error::validation(format!("embedding {i} ({l:?}): {e}")))
        })
        .collect()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}
