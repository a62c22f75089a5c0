//! Text encoding through external dense (`/v1/embeddings`) and sparse
//! (`/encode_sparse`) endpoints.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::describe::{check, defaults, load_jsonl, open_for_append, validate_endpoint};
use crate::error::{Error, Result};
use crate::http::{endpoint, JsonClient, RetryPolicy};
use crate::index::Similarity;
use crate::model::{sha256_hex, DenseVector, SparseVector};

pub const ENCODER_API_KEY_ENV: &str = "SERVAL_ENCODER_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Document,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "query",
            Role::Document => "document",
        })
    }
}

fn default_batch_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub base_url: String,
    pub model_id: String,
    pub kind: EncoderKind,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Prepended verbatim to every query.
    #[serde(default)]
    pub query_instruction: Option<String>,
    /// Prepended verbatim to every document description.
    #[serde(default)]
    pub doc_instruction: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Dense only: rescale every returned vector to unit length.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Dense only: scoring used by the index.
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default = "defaults::timeout_s")]
    pub request_timeout_s: f64,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "defaults::retry_base_delay_s")]
    pub retry_base_delay_s: f64,
}

impl EncoderConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>, kind: EncoderKind) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            kind,
            api_key: None,
            query_instruction: None,
            doc_instruction: None,
            batch_size: default_batch_size(),
            normalize: true,
            similarity: Similarity::default(),
            request_timeout_s: defaults::timeout_s(),
            max_retries: defaults::max_retries(),
            max_concurrency: defaults::max_concurrency(),
            retry_base_delay_s: defaults::retry_base_delay_s(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_endpoint("encoder", &self.base_url, &self.model_id)?;
        check(self.batch_size > 0, "encoder.batch_size must be > 0")?;
        check(self.max_concurrency > 0, "encoder.max_concurrency must be > 0")?;
        check(
            self.request_timeout_s.is_finite() && self.request_timeout_s > 0.0,
            "encoder.request_timeout_s must be > 0",
        )?;
        check(
            self.retry_base_delay_s.is_finite() && self.retry_base_delay_s >= 0.0,
            "encoder.retry_base_delay_s must be >= 0",
        )
    }

    /// Replaces `api_key` with `SERVAL_ENCODER_API_KEY` when that variable is set.
    pub fn apply_env(&mut self) {
        if let Ok(key) = std::env::var(ENCODER_API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
    }

    pub fn instruction(&self, role: Role) -> &str {
        match role {
            Role::Query => self.query_instruction.as_deref(),
            Role::Document => self.doc_instruction.as_deref(),
        }
        .unwrap_or("")
    }
}

/// Output of either encoder kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedding {
    Dense(DenseVector),
    Sparse(SparseVector),
}

impl Embedding {
    pub fn into_dense(self) -> Option<DenseVector> {
        match self {
            Embedding::Dense(v) => Some(v),
            Embedding::Sparse(_) => None,
        }
    }

    pub fn into_sparse(self) -> Option<SparseVector> {
        match self {
            Embedding::Sparse(v) => Some(v),
            Embedding::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    client: JsonClient,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let client = JsonClient::new(
            Duration::from_secs_f64(cfg.request_timeout_s),
            cfg.api_key.clone(),
            RetryPolicy {
                max_retries: cfg.max_retries,
                base_delay: Duration::from_secs_f64(cfg.retry_base_delay_s),
                factor: 2.0,
            },
        )?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Dense vectors in input order; unit length when `normalize` is set.
    pub fn encode_dense(&self, texts: &[String], role: Role) -> Result<Vec<DenseVector>> {
        self.encode_dense_raw(texts, role)?
            .into_iter()
            .map(|v| self.finish_dense(v))
            .collect()
    }

    pub fn encode_sparse(&self, texts: &[String], role: Role) -> Result<Vec<SparseVector>> {
        self.require(EncoderKind::Sparse)?;
        self.batched(texts, role, |batch| self.request_sparse(batch))
    }

    /// Encodes through `cache`: only texts without a cached entry are sent. The
    /// second value is the number of texts that had to be encoded.
    pub fn encode_cached(
        &self,
        texts: &[String],
        role: Role,
        cache: &EmbeddingCache,
    ) -> Result<(Vec<Embedding>, usize)> {
        let instruction_hash = sha256_hex(self.cfg.instruction(role));
        let keys: Vec<EmbeddingKey> = texts
            .iter()
            .map(|t| EmbeddingKey {
                model_id: self.cfg.model_id.clone(),
                role,
                instruction_hash: instruction_hash.clone(),
                text_hash: sha256_hex(t),
            })
            .collect();
        let mut found: Vec<Option<Embedding>> = keys.iter().map(|k| cache.get(k)).collect();

        // Encode each distinct missing text once.
        let mut seen = HashSet::new();
        let missing: Vec<usize> = (0..texts.len())
            .filter(|&i| found[i].is_none() && seen.insert(&keys[i]))
            .collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh: Vec<Embedding> = match self.cfg.kind {
                EncoderKind::Dense => self
                    .encode_dense_raw(&batch, role)?
                    .into_iter()
                    .map(Embedding::Dense)
                    .collect(),
                EncoderKind::Sparse => self
                    .encode_sparse(&batch, role)?
                    .into_iter()
                    .map(Embedding::Sparse)
                    .collect(),
            };
            let entries = missing
                .iter()
                .zip(fresh)
                .map(|(&i, e)| (keys[i].clone(), e))
                .collect::<Vec<_>>();
            cache.insert_all(&entries)?;
            for i in 0..texts.len() {
                if found[i].is_none() {
                    found[i] = cache.get(&keys[i]);
                }
            }
        }

        let out = found
            .into_iter()
            .map(|e| match e.expect("all entries resolved") {
                Embedding::Dense(v) => self.finish_dense(v).map(Embedding::Dense),
                sparse => Ok(sparse),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, missing.len()))
    }

    /// Looks embeddings up without contacting the endpoint; `None` marks a miss.
    pub fn lookup_cached(
        &self,
        texts: &[String],
        role: Role,
        cache: &EmbeddingCache,
    ) -> Result<Vec<Option<Embedding>>> {
        let instruction_hash = sha256_hex(self.cfg.instruction(role));
        texts
            .iter()
            .map(|t| {
                let key = EmbeddingKey {
                    model_id: self.cfg.model_id.clone(),
                    role,
                    instruction_hash: instruction_hash.clone(),
                    text_hash: sha256_hex(t),
                };
                match cache.get(&key) {
                    Some(Embedding::Dense(v)) => self.finish_dense(v).map(|v| Some(Embedding::Dense(v))),
                    other => Ok(other),
                }
            })
            .collect()
    }

    fn finish_dense(&self, v: DenseVector) -> Result<DenseVector> {
        if self.cfg.normalize {
            v.normalized()
                .map_err(|e| Error::Protocol(format!("encoder returned unusable vector: {e}")))
        } else {
            Ok(v)
        }
    }

    fn encode_dense_raw(&self, texts: &[String], role: Role) -> Result<Vec<DenseVector>> {
        self.require(EncoderKind::Dense)?;
        let vectors = self.batched(texts, role, |batch| self.request_dense(batch))?;
        if let Some(first) = vectors.first() {
            let dim = first.dim();
            if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
                return Err(Error::Protocol(format!(
                    "embedding dimension mismatch: {} vs {dim}",
                    v.dim()
                )));
            }
        }
        Ok(vectors)
    }

    fn require(&self, kind: EncoderKind) -> Result<()> {
        if self.cfg.kind != kind {
            return Err(Error::Config(format!(
                "encoder {} is configured as {:?}, not {kind:?}",
                self.cfg.model_id, self.cfg.kind
            )));
        }
        Ok(())
    }

    fn prefixed(&self, texts: &[String], role: Role) -> Result<Vec<String>> {
        let prefix = self.cfg.instruction(role);
        texts
            .iter()
            .map(|t| {
                if t.is_empty() {
                    Err(Error::InvalidInput("cannot encode an empty text".into()))
                } else {
                    Ok(format!("{prefix}{t}"))
                }
            })
            .collect()
    }

    /// Splits into `batch_size` chunks and runs at most `max_concurrency` at once,
    /// reassembling results in input order.
    fn batched<T: Send>(
        &self,
        texts: &[String],
        role: Role,
        request: impl Fn(&[String]) -> Result<Vec<T>> + Sync,
    ) -> Result<Vec<T>> {
        let inputs = self.prefixed(texts, role)?;
        let batches: Vec<&[String]> = inputs.chunks(self.cfg.batch_size).collect();
        let results: Vec<Mutex<Option<Result<Vec<T>>>>> =
            batches.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_concurrency.min(batches.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(i) else { break };
                    let r = request(batch).and_then(|out| {
                        if out.len() == batch.len() {
                            Ok(out)
                        } else {
                            Err(Error::Protocol(format!(
                                "sent {} inputs, received {} outputs",
                                batch.len(),
                                out.len()
                            )))
                        }
                    });
                    let failed = r.is_err();
                    *results[i].lock().unwrap() = Some(r);
                    if failed {
                        // stop handing out further batches
                        next.store(batches.len(), Ordering::Relaxed);
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for slot in results {
            match slot.into_inner().unwrap() {
                Some(r) => out.extend(r?),
                None => continue,
            }
        }
        if out.len() != texts.len() {
            return Err(Error::Protocol("encoding aborted after a failed batch".into()));
        }
        Ok(out)
    }

    fn request_dense(&self, batch: &[String]) -> Result<Vec<DenseVector>> {
        let url = endpoint(&self.cfg.base_url, "v1/embeddings");
        let (resp, _) = self
            .client
            .post(&url, &json!({"model": self.cfg.model_id, "input": batch}))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol("embeddings response has no `data` array".into()))?;
        let mut slots: Vec<Option<DenseVector>> = vec![None; batch.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = match item.get("index") {
                Some(i) => i
                    .as_u64()
                    .ok_or_else(|| Error::Protocol("`data[].index` is not an integer".into()))?
                    as usize,
                None => pos,
            };
            let values: Vec<f64> = serde_json::from_value(
                item.get("embedding")
                    .cloned()
                    .ok_or_else(|| Error::Protocol("`data[].embedding` missing".into()))?,
            )
            .map_err(|e| Error::Protocol(format!("`data[].embedding`: {e}")))?;
            let slot = slots
                .get_mut(index)
                .ok_or_else(|| Error::Protocol(format!("embedding index {index} out of range")))?;
            if slot.is_some() {
                return Err(Error::Protocol(format!("embedding index {index} repeated")));
            }
            *slot = Some(DenseVector::new(values).map_err(|e| Error::Protocol(e.to_string()))?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Protocol(format!("no embedding for input {i}"))))
            .collect()
    }

    fn request_sparse(&self, batch: &[String]) -> Result<Vec<SparseVector>> {
        let url = endpoint(&self.cfg.base_url, "encode_sparse");
        let (resp, _) = self
            .client
            .post(&url, &json!({"model": self.cfg.model_id, "input": batch}))?;
        let maps: Vec<BTreeMap<String, f64>> = resp
            .get("sparse")
            .cloned()
            .ok_or_else(|| Error::Protocol("sparse response has no `sparse` array".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::Protocol(format!("`sparse`: {e}")))
            })?;
        Ok(maps.into_iter().map(SparseVector::from_weights).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingKey {
    pub model_id: String,
    pub role: Role,
    pub instruction_hash: String,
    pub text_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: EmbeddingKey,
    #[serde(flatten)]
    value: Embedding,
}

/// Append-only JSONL embedding store. Dense vectors are stored as returned by the
/// server, before normalization.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    inner: Mutex<(HashMap<EmbeddingKey, Embedding>, File)>,
}

impl EmbeddingCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (index, valid_len) = load_jsonl(&path, |l: CacheLine| (l.key, l.value))?;
        let file = open_for_append(&path, valid_len)?;
        Ok(Self {
            path,
            inner: Mutex::new((index, file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<Embedding> {
        self.inner.lock().unwrap().0.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_all(&self, entries: &[(EmbeddingKey, Embedding)]) -> Result<()> {
        let mut buf = Vec::new();
        for (key, value) in entries {
            serde_json::to_writer(
                &mut buf,
                &CacheLine {
                    key: key.clone(),
                    value: value.clone(),
                },
            )
            .expect("embedding serializes");
            buf.push(b'\n');
        }
        let mut inner = self.inner.lock().unwrap();
        inner
            .1
            .write_all(&buf)
            .and_then(|_| inner.1.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        for (key, value) in entries {
            inner.0.insert(key.clone(), value.clone());
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct SparseLine {
    #[serde(rename = "_id")]
    id: String,
    sparse: SparseVector,
}

/// Loads precomputed sparse vectors from JSONL lines `{"_id": ..., "sparse": {term: weight}}`.
pub fn read_sparse_jsonl(path: &Path) -> Result<HashMap<String, SparseVector>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SparseLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.insert(row.id.clone(), row.sparse).is_some() {
            return Err(Error::DuplicateId {
                kind: "sparse vector",
                id: row.id,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instructions_by_role() {
        let mut cfg = EncoderConfig::new("http://x", "m", EncoderKind::Dense);
        assert_eq!(cfg.instruction(Role::Query), "");
        cfg.query_instruction = Some("Q: ".into());
        cfg.doc_instruction = Some("D: ".into());
        assert_eq!(cfg.instruction(Role::Query), "Q: ");
        assert_eq!(cfg.instruction(Role::Document), "D: ");
    }

    #[test]
    fn wrong_kind_is_config_error() {
        let enc = Encoder::new(EncoderConfig::new("http://127.0.0.1:9", "m", EncoderKind::Sparse)).unwrap();
        assert!(matches!(
            enc.encode_dense(&["a".into()], Role::Query),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_text_rejected_before_network() {
        let enc = Encoder::new(EncoderConfig::new("http://127.0.0.1:9", "m", EncoderKind::Dense)).unwrap();
        assert!(matches!(
            enc.encode_dense(&["".into()], Role::Query),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cache_line_format() {
        let line = CacheLine {
            key: EmbeddingKey {
                model_id: "m".into(),
                role: Role::Document,
                instruction_hash: "ih".into(),
                text_hash: "th".into(),
            },
            value: Embedding::Sparse(SparseVector::from_weights([("a", 1.0)])),
        };
        assert_eq!(
            serde_json::to_string(&line).unwrap(),
            r#"{"model_id":"m","role":"document","instruction_hash":"ih","text_hash":"th","sparse":{"a":1.0}}"#
        );
    }

    #[test]
    fn sparse_jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "{\"_id\":\"d1\",\"sparse\":{\"a\":2.0,\"b\":0.0}}\n").unwrap();
        let m = read_sparse_jsonl(&path).unwrap();
        assert_eq!(m["d1"], SparseVector::from_weights([("a", 2.0)]));
        std::fs::write(
            &path,
            "{\"_id\":\"d1\",\"sparse\":{}}\n{\"_id\":\"d1\",\"sparse\":{}}\n",
        )
        .unwrap();
        assert!(matches!(read_sparse_jsonl(&path), Err(Error::DuplicateId { .. })));
    }
}
