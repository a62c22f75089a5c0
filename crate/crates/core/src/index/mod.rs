//! Exhaustive dense and inverted sparse indexes with persistent file formats.
//!
//! Both index files end with a little-endian CRC32 over every preceding byte.

mod dense;
mod sparse;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dense::DenseIndex;
pub use sparse::SparseIndex;

use crate::error::{Error, Result};
use crate::model::{rank_order, ScoredDoc};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    fn code(self) -> u8 {
        match self {
            Similarity::Cosine => 0,
            Similarity::Dot => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Similarity::Cosine),
            1 => Some(Similarity::Dot),
            _ => None,
        }
    }
}

/// Selects the best `k` of `(ordinal, score)` pairs in ranking order.
pub(crate) fn top_k(
    scored: impl IntoIterator<Item = (usize, f64)>,
    k: usize,
    doc_ids: &[String],
) -> Vec<ScoredDoc> {
    let mut all: Vec<ScoredDoc> = scored
        .into_iter()
        .map(|(i, s)| ScoredDoc::new(doc_ids[i].clone(), if s == 0.0 { 0.0 } else { s }))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_by(rank_order);
    all
}

pub(crate) fn check_unique(doc_ids: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(doc_ids.len());
    for id in doc_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                kind: "document",
                id: id.clone(),
            });
        }
    }
    Ok(())
}

/// Appends the CRC and writes the whole image via a temporary file and rename.
pub(crate) fn write_with_crc(path: &Path, mut bytes: Vec<u8>) -> Result<()> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Verifies magic, minimum length and checksum, then version. Returns the payload
/// between the version field and the CRC.
pub(crate) fn read_checked<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: &[u8; 4],
    min_header: usize,
) -> Result<&'a [u8]> {
    let needed = min_header + 4;
    if bytes.len() >= 4 && &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            actual: bytes.len(),
            needed,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(&body[8..])
}
