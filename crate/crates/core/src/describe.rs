//! Document description through an OpenAI-compatible vision chat endpoint.
//!
//! Every document image is sent once, as a base64 data URI next to the prompt, and
//! the completion becomes the document's textual stand-in. Results are kept in an
//! append-only JSONL cache keyed by `(model_id, prompt_hash, content_hash)`, so a
//! corpus run can be interrupted and resumed without re-issuing requests.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use base64::Engine;
use log::{info, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::{endpoint, JsonClient, RetryPolicy};
use crate::model::{sha256_hex, Description, DescriptionKey, DocRef, DocSource};

pub const VLM_API_KEY_ENV: &str = "SERVAL_VLM_API_KEY";

/// The default description prompt.
pub const DEFAULT_PROMPT: &str = "Provide a comprehensive description of the document in the image in English. Begin with a summary, then follow with details. Extract all visible text and numerical values from the document.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmEndpointConfig {
    pub base_url: String,
    pub model_id: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "defaults::timeout_s")]
    pub request_timeout_s: f64,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::max_concurrency")]
    pub max_concurrency: usize,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "defaults::retry_base_delay_s")]
    pub retry_base_delay_s: f64,
    /// Used for token counts when the server does not report `usage.completion_tokens`.
    #[serde(default)]
    pub tokenizer: Tokenizer,
}

pub(crate) mod defaults {
    pub fn max_tokens() -> u32 {
        2048
    }
    pub fn timeout_s() -> f64 {
        120.0
    }
    pub fn max_retries() -> u32 {
        3
    }
    pub fn max_concurrency() -> usize {
        4
    }
    pub fn retry_base_delay_s() -> f64 {
        1.0
    }
}

impl VlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key: None,
            max_tokens: defaults::max_tokens(),
            temperature: 0.0,
            request_timeout_s: defaults::timeout_s(),
            max_retries: defaults::max_retries(),
            max_concurrency: defaults::max_concurrency(),
            retry_base_delay_s: defaults::retry_base_delay_s(),
            tokenizer: Tokenizer::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_endpoint("vlm", &self.base_url, &self.model_id)?;
        check(self.max_tokens > 0, "vlm.max_tokens must be > 0")?;
        check(
            self.temperature.is_finite() && self.temperature >= 0.0,
            "vlm.temperature must be >= 0",
        )?;
        check(
            self.request_timeout_s.is_finite() && self.request_timeout_s > 0.0,
            "vlm.request_timeout_s must be > 0",
        )?;
        check(self.max_concurrency > 0, "vlm.max_concurrency must be > 0")?;
        check(
            self.retry_base_delay_s.is_finite() && self.retry_base_delay_s >= 0.0,
            "vlm.retry_base_delay_s must be >= 0",
        )
    }

    /// Replaces `api_key` with `SERVAL_VLM_API_KEY` when that variable is set.
    pub fn apply_env(&mut self) {
        if let Ok(key) = std::env::var(VLM_API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
    }

    pub(crate) fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_secs_f64(self.retry_base_delay_s),
            factor: 2.0,
        }
    }
}

pub(crate) fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

pub(crate) fn validate_endpoint(section: &str, base_url: &str, model_id: &str) -> Result<()> {
    let url = url::Url::parse(base_url)
        .map_err(|e| Error::Config(format!("{section}.base_url {base_url:?}: {e}")))?;
    check(
        matches!(url.scheme(), "http" | "https"),
        &format!("{section}.base_url must be http(s)"),
    )?;
    check(!model_id.is_empty(), &format!("{section}.model_id must not be empty"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.text)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_PROMPT)
    }
}

/// Local token counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    /// Whitespace-separated chunks.
    #[default]
    Whitespace,
    /// Runs of word characters plus each standalone punctuation mark.
    UnicodeWords,
}

impl Tokenizer {
    pub fn count(self, text: &str) -> u64 {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count() as u64,
            Tokenizer::UnicodeWords => {
                static RE: OnceLock<Regex> = OnceLock::new();
                let re = RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").unwrap());
                re.find_iter(text).count() as u64
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::Whitespace => "whitespace",
            Tokenizer::UnicodeWords => "unicode-words",
        }
    }
}

/// Append-only JSONL store of descriptions with an in-memory key index.
#[derive(Debug)]
pub struct DescriptionCache {
    path: PathBuf,
    inner: Mutex<CacheInner>,
}

#[derive(Debug)]
struct CacheInner {
    index: HashMap<DescriptionKey, Description>,
    file: File,
}

impl DescriptionCache {
    /// Opens (creating if needed) the cache file and indexes every stored entry.
    /// A final line cut short by an interrupted write is dropped from the file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (index, valid_len) = load_jsonl(&path, |d: Description| (d.key(), d))?;
        let file = open_for_append(&path, valid_len)?;
        Ok(Self {
            path,
            inner: Mutex::new(CacheInner { index, file }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &DescriptionKey) -> Option<Description> {
        self.inner.lock().unwrap().index.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, description: Description) -> Result<()> {
        let mut line = serde_json::to_string(&description).expect("description serializes");
        line.push('\n');
        let mut inner = self.inner.lock().unwrap();
        inner
            .file
            .write_all(line.as_bytes())
            .and_then(|_| inner.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        inner.index.insert(description.key(), description);
        Ok(())
    }
}

/// A description together with whether it came from the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Described {
    pub description: Description,
    pub source: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Generated,
    Cached,
    /// Text document; the body is used as-is.
    Copied,
}

#[derive(Debug, Clone)]
pub struct Describer {
    cfg: VlmEndpointConfig,
    prompt: PromptTemplate,
    prompt_hash: String,
    client: JsonClient,
}

impl Describer {
    pub fn new(cfg: VlmEndpointConfig, prompt: PromptTemplate) -> Result<Self> {
        cfg.validate()?;
        let client = JsonClient::new(
            Duration::from_secs_f64(cfg.request_timeout_s),
            cfg.api_key.clone(),
            cfg.retry_policy(),
        )?;
        Ok(Self {
            prompt_hash: prompt.hash(),
            cfg,
            prompt,
            client,
        })
    }

    pub fn config(&self) -> &VlmEndpointConfig {
        &self.cfg
    }

    /// Cache key for `doc` under this model and prompt.
    pub fn key_for(&self, doc: &DocRef) -> Result<DescriptionKey> {
        Ok(DescriptionKey {
            model_id: self.cfg.model_id.clone(),
            prompt_hash: self.prompt_hash.clone(),
            content_hash: sha256_hex(doc.content_bytes()?),
        })
    }

    /// Looks a document up without contacting the endpoint. Text documents always resolve.
    pub fn lookup(&self, doc: &DocRef, cache: &DescriptionCache) -> Result<Option<Described>> {
        if let DocSource::Text(body) = &doc.source {
            return Ok(Some(Described {
                description: self.copy_text(doc, body),
                source: Provenance::Copied,
            }));
        }
        let key = self.key_for(doc)?;
        Ok(cache.get(&key).map(|mut d| {
            d.doc_id = doc.doc_id.clone();
            Described {
                description: d,
                source: Provenance::Cached,
            }
        }))
    }

    /// Returns the cached description or generates, stores and returns a new one.
    pub fn describe(&self, doc: &DocRef, cache: &DescriptionCache) -> Result<Described> {
        if let Some(hit) = self.lookup(doc, cache)? {
            return Ok(hit);
        }
        let DocSource::Image(path) = &doc.source else {
            unreachable!("text documents resolve in lookup");
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let content_hash = sha256_hex(&bytes);
        let body = self.request_body(&bytes, path);
        let url = endpoint(&self.cfg.base_url, "v1/chat/completions");
        let (resp, latency) = self.client.post(&url, &body)?;
        let (text, reported_tokens) = parse_completion(&resp)?;
        if text.trim().is_empty() {
            return Err(Error::EmptyDescription {
                doc_id: doc.doc_id.clone(),
            });
        }
        let token_count = reported_tokens.unwrap_or_else(|| self.cfg.tokenizer.count(&text));
        let description = Description {
            doc_id: doc.doc_id.clone(),
            model_id: self.cfg.model_id.clone(),
            prompt_hash: self.prompt_hash.clone(),
            content_hash,
            text,
            token_count,
            gen_latency_s: latency.as_secs_f64(),
        };
        cache.insert(description.clone())?;
        Ok(Described {
            description,
            source: Provenance::Generated,
        })
    }

    fn copy_text(&self, doc: &DocRef, body: &str) -> Description {
        Description {
            doc_id: doc.doc_id.clone(),
            model_id: self.cfg.model_id.clone(),
            prompt_hash: self.prompt_hash.clone(),
            content_hash: sha256_hex(body),
            text: body.to_string(),
            token_count: self.cfg.tokenizer.count(body),
            gen_latency_s: 0.0,
        }
    }

    /// Chat-completion payload: one user message holding the image, then the prompt.
    pub fn request_body(&self, image: &[u8], path: &Path) -> Value {
        let data_uri = format!(
            "data:image/{};base64,{}",
            image_format(image, path),
            base64::engine::general_purpose::STANDARD.encode(image)
        );
        json!({
            "model": self.cfg.model_id,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": data_uri}},
                    {"type": "text", "text": self.prompt.text},
                ],
            }],
        })
    }

    /// Describes every document with at most `max_concurrency` requests in flight.
    /// Failures are collected per document; successes are cached as they arrive.
    pub fn describe_corpus(&self, docs: &[DocRef], cache: &DescriptionCache) -> CorpusRun {
        let slots: Vec<Mutex<Option<Result<Described>>>> =
            docs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_concurrency.min(docs.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(doc) = docs.get(i) else { break };
                    let outcome = self.describe(doc, cache);
                    if let Ok(d) = &outcome {
                        if d.source == Provenance::Generated {
                            info!("described {} in {:.3}s", doc.doc_id, d.description.gen_latency_s);
                        }
                    }
                    *slots[i].lock().unwrap() = Some(outcome);
                });
            }
        });

        let mut run = CorpusRun::default();
        for (doc, slot) in docs.iter().zip(slots) {
            match slot.into_inner().unwrap().expect("every slot is filled") {
                Ok(d) => {
                    match d.source {
                        Provenance::Generated => run.summary.generated += 1,
                        Provenance::Cached => run.summary.cached += 1,
                        Provenance::Copied => run.summary.copied += 1,
                    }
                    run.described.push(d);
                }
                Err(e) => run.summary.failed.push((doc.doc_id.clone(), e)),
            }
        }
        run
    }
}

fn parse_completion(resp: &Value) -> Result<(String, Option<u64>)> {
    let text = resp
        .pointer("/choices/0/message/content")
        .ok_or_else(|| Error::Protocol("response has no choices[0].message.content".into()))?;
    let text = match text {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => {
            return Err(Error::Protocol(format!(
                "choices[0].message.content is not a string: {other}"
            )))
        }
    };
    let tokens = resp.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Ok((text, tokens))
}

/// Image subtype for the data URI, from magic bytes, falling back to the extension.
fn image_format(bytes: &[u8], path: &Path) -> String {
    let sniffed = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("jpeg")
    } else if bytes.starts_with(b"GIF8") {
        Some("gif")
    } else if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        Some("webp")
    } else if bytes.starts_with(b"BM") {
        Some("bmp")
    } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
        Some("tiff")
    } else {
        None
    };
    match sniffed {
        Some(f) => f.to_string(),
        None => match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jpg") | Some("jpeg") => "jpeg".into(),
            Some(ext) if !ext.is_empty() => ext.to_string(),
            _ => "png".into(),
        },
    }
}

/// Reads a JSONL store into a map. Returns the map and the byte length of the
/// well-formed prefix; only an unterminated or unparsable last line may be skipped.
pub(crate) fn load_jsonl<T, K, V>(
    path: &Path,
    mut entry: impl FnMut(T) -> (K, V),
) -> Result<(HashMap<K, V>, u64)>
where
    T: serde::de::DeserializeOwned,
    K: std::hash::Hash + Eq,
{
    let mut index = HashMap::new();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((index, 0)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|i| offset + i + 1);
        let line = &bytes[offset..end.unwrap_or(bytes.len())];
        let is_last = end.is_none_or(|e| e == bytes.len());
        if !line.iter().all(u8::is_ascii_whitespace) {
            match serde_json::from_slice::<T>(line) {
                Ok(v) => {
                    let (k, v) = entry(v);
                    index.insert(k, v);
                }
                Err(_) if is_last => {
                    warn!("{}: dropping incomplete final entry", path.display());
                    return Ok((index, offset as u64));
                }
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
        }
        offset = end.unwrap_or(bytes.len());
    }
    Ok((index, bytes.len() as u64))
}

pub(crate) fn open_for_append(path: &Path, valid_len: u64) -> Result<File> {
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len > valid_len {
        file.set_len(valid_len).map_err(|e| Error::io(path, e))?;
    }
    if valid_len > 0 {
        use std::io::{Read, Seek, SeekFrom};
        let mut last = [0u8; 1];
        file.seek(SeekFrom::Start(valid_len - 1))
            .and_then(|_| file.read_exact(&mut last))
            .map_err(|e| Error::io(path, e))?;
        if last[0] != b'\n' {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(file)
}

#[derive(Debug, Default)]
pub struct CorpusRun {
    pub described: Vec<Described>,
    pub summary: CorpusSummary,
}

#[derive(Debug, Default)]
pub struct CorpusSummary {
    pub generated: usize,
    pub cached: usize,
    pub copied: usize,
    pub failed: Vec<(String, Error)>,
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} generated, {} cached, {} copied, {} failed",
            self.generated,
            self.cached,
            self.copied,
            self.failed.len()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn summarize(values: impl IntoIterator<Item = f64>) -> Option<SummaryStats> {
    let values: Vec<f64> = values.into_iter().collect();
    if values.is_empty() {
        return None;
    }
    let sum: f64 = values.iter().sum();
    Some(SummaryStats {
        count: values.len(),
        mean: sum / values.len() as f64,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Mean (and count/min/max) of generated tokens per description.
pub fn token_stats(descriptions: &[Description]) -> Result<SummaryStats> {
    summarize(descriptions.iter().map(|d| d.token_count as f64))
        .ok_or(Error::EmptyInput("token statistics need at least one description"))
}

/// Mean (and count/min/max) generation latency in seconds.
pub fn bench_latency(descriptions: &[Description]) -> Result<SummaryStats> {
    summarize(descriptions.iter().map(|d| d.gen_latency_s))
        .ok_or(Error::EmptyInput("latency statistics need at least one description"))
}
