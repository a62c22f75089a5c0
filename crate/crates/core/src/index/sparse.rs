use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_unique, read_checked, top_k, write_with_crc, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{ScoredDoc, SparseVector};

const MAGIC: &[u8; 4] = b"SRVS";
const HEADER_LEN: usize = 8;

/// Term -> postings `(ordinal, weight)` sorted by ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    doc_ids: Vec<String>,
    postings: BTreeMap<String, Vec<(u32, f64)>>,
}

impl SparseIndex {
    /// Documents with empty vectors keep an ordinal but appear in no postings list.
    pub fn build(doc_ids: Vec<String>, vectors: &[SparseVector]) -> Result<Self> {
        if doc_ids.len() != vectors.len() {
            return Err(Error::InvalidInput(format!(
                "{} doc ids but {} vectors",
                doc_ids.len(),
                vectors.len()
            )));
        }
        if doc_ids.is_empty() {
            return Err(Error::EmptyInput("sparse index needs at least one document"));
        }
        if doc_ids.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("too many documents".into()));
        }
        check_unique(&doc_ids)?;
        let mut postings: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
        for (ordinal, v) in vectors.iter().enumerate() {
            for (term, weight) in v.iter() {
                postings
                    .entry(term.to_string())
                    .or_default()
                    .push((ordinal as u32, weight));
            }
        }
        Ok(Self { doc_ids, postings })
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

    pub fn postings(&self, term: &str) -> &[(u32, f64)] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    /// Dot-product scores of the documents sharing at least one term with the query.
    /// Query terms are visited in ascending order.
    pub fn scores(&self, query: &SparseVector) -> Vec<(usize, f64)> {
        let mut acc = vec![0.0f64; self.doc_ids.len()];
        let mut touched = vec![false; self.doc_ids.len()];
        for (term, qw) in query.iter() {
            for &(ordinal, dw) in self.postings(term) {
                let i = ordinal as usize;
                acc[i] += qw * dw;
                touched[i] = true;
            }
        }
        acc.into_iter()
            .enumerate()
            .filter(|(i, s)| touched[*i] && *s > 0.0)
            .collect()
    }

    /// Top `k` matching documents; documents scoring zero are never returned.
    pub fn search(&self, query: &SparseVector, k: usize) -> Vec<ScoredDoc> {
        top_k(self.scores(query), k, &self.doc_ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        serde_json::to_writer(&mut bytes, self).expect("sparse index serializes");
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
        let index: SparseIndex =
            serde_json::from_slice(payload).map_err(|e| corrupt(format!("body: {e}")))?;
        check_unique(&index.doc_ids)?;
        let n = index.doc_ids.len() as u64;
        for (term, list) in &index.postings {
            let mut prev: Option<u32> = None;
            for &(ordinal, weight) in list {
                if u64::from(ordinal) >= n {
                    return Err(corrupt(format!("term {term:?}: ordinal {ordinal} out of range")));
                }
                if prev.is_some_and(|p| p >= ordinal) {
                    return Err(corrupt(format!("term {term:?}: postings not strictly ascending")));
                }
                if !(weight.is_finite() && weight > 0.0) {
                    return Err(corrupt(format!("term {term:?}: invalid weight {weight}")));
                }
                prev = Some(ordinal);
            }
        }
        Ok(index)
    }
}
