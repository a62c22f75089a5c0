use std::path::Path;

use super::{check_unique, read_checked, top_k, write_with_crc, Similarity, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{DenseVector, ScoredDoc};

const MAGIC: &[u8; 4] = b"SRVD";
// magic, version, dim, count, similarity
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1;
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Row-major `f32` matrix scored exhaustively in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    doc_ids: Vec<String>,
    rows: Vec<f32>,
    similarity: Similarity,
}

impl DenseIndex {
    /// In cosine mode every row is rescaled to unit length before storage.
    pub fn build(doc_ids: Vec<String>, vectors: &[DenseVector], similarity: Similarity) -> Result<Self> {
        if doc_ids.is_empty() {
            return Err(Error::EmptyInput("dense index needs at least one document"));
        }
        if doc_ids.len() != vectors.len() {
            return Err(Error::InvalidInput(format!(
                "{} doc ids but {} vectors",
                doc_ids.len(),
                vectors.len()
            )));
        }
        check_unique(&doc_ids)?;
        let dim = vectors[0].dim();
        if dim == 0 {
            return Err(Error::InvalidInput("zero-dimensional vectors".into()));
        }
        let mut rows = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            let v = match similarity {
                Similarity::Cosine => v.normalized()?,
                Similarity::Dot => v.clone(),
            };
            rows.extend(v.as_slice().iter().map(|x| *x as f32));
        }
        Ok(Self {
            dim,
            doc_ids,
            rows,
            similarity,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn row(&self, ordinal: usize) -> &[f32] {
        &self.rows[ordinal * self.dim..(ordinal + 1) * self.dim]
    }

    fn prepare_query(&self, query: &DenseVector) -> Result<DenseVector> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        match self.similarity {
            Similarity::Cosine => query.normalized(),
            Similarity::Dot => Ok(query.clone()),
        }
    }

    /// Exact score of every document, by ordinal.
    pub fn scores(&self, query: &DenseVector) -> Result<Vec<f64>> {
        let q = self.prepare_query(query)?;
        let q = q.as_slice();
        Ok(self
            .rows
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(q).map(|(r, x)| f64::from(*r) * x).sum())
            .collect())
    }

    /// Top `min(k, N)` documents ordered by score descending, then doc id.
    pub fn search(&self, query: &DenseVector, k: usize) -> Result<Vec<ScoredDoc>> {
        let scores = self.scores(query)?;
        Ok(top_k(scores.into_iter().enumerate(), k, &self.doc_ids))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ids = serde_json::to_vec(&self.doc_ids).expect("doc ids serialize");
        let mut bytes = Vec::with_capacity(HEADER_LEN + self.rows.len() * 4 + ids.len() + 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.doc_ids.len() as u64).to_le_bytes());
        bytes.push(self.similarity.code());
        for x in &self.rows {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        bytes.extend_from_slice(&ids);
        write_with_crc(path, bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let payload = read_checked(path, bytes, MAGIC, HEADER_LEN)?;
        let corrupt = |message: String| Error::CorruptIndex {
            path: path.to_path_buf(),
            message,
        };
        let dim = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(payload[4..12].try_into().unwrap());
        let similarity = Similarity::from_code(payload[12])
            .ok_or_else(|| corrupt(format!("unknown similarity code {}", payload[12])))?;
        let matrix_len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt("matrix size overflows".into()))?;
        let rest = &payload[13..];
        if rest.len() < matrix_len {
            return Err(corrupt(format!(
                "matrix needs {matrix_len} bytes, {} present",
                rest.len()
            )));
        }
        let rows: Vec<f32> = rest[..matrix_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let doc_ids: Vec<String> = serde_json::from_slice(&rest[matrix_len..])
            .map_err(|e| corrupt(format!("doc id list: {e}")))?;
        if doc_ids.len() as u64 != count || dim == 0 || count == 0 {
            return Err(corrupt(format!(
                "header declares {count} x {dim}, doc id list has {}",
                doc_ids.len()
            )));
        }
        check_unique(&doc_ids)?;
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(corrupt("non-finite matrix entry".into()));
        }
        let index = Self {
            dim,
            doc_ids,
            rows,
            similarity,
        };
        if similarity == Similarity::Cosine {
            for i in 0..index.len() {
                let norm = index
                    .row(i)
                    .iter()
                    .map(|x| f64::from(*x) * f64::from(*x))
                    .sum::<f64>()
                    .sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(corrupt(format!("row {i} has norm {norm} in cosine mode")));
                }
            }
        }
        Ok(index)
    }
}
