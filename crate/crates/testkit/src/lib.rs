//! Scripted in-process HTTP mocks of the VLM and encoder endpoints.
//!
//! Both mocks count requests, track the peak number of requests in flight and
//! record every request body so tests can assert on wire payloads.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tiny_http::{Header, Response, Server};

const WORKERS: usize = 16;

#[derive(Default)]
struct Counters {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<Option<String>>>,
}

type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

struct MockServer {
    server: Arc<Server>,
    counters: Arc<Counters>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    fn start(handler: Arc<Handler>, delay: Arc<Mutex<Duration>>) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind mock server"));
        let counters = Arc::new(Counters::default());
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let counters = Arc::clone(&counters);
                let handler = Arc::clone(&handler);
                let delay = Arc::clone(&delay);
                std::thread::spawn(move || {
                    while let Ok(mut req) = server.recv() {
                        let now = counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        counters.peak.fetch_max(now, Ordering::SeqCst);
                        counters.requests.fetch_add(1, Ordering::SeqCst);
                        let mut raw = String::new();
                        let _ = req.as_reader().read_to_string(&mut raw);
                        let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
                        counters.bodies.lock().unwrap().push(body.clone());
                        let auth = req
                            .headers()
                            .iter()
                            .find(|h| h.field.equiv("Authorization"))
                            .map(|h| h.value.to_string());
                        counters.auth.lock().unwrap().push(auth);
                        let pause = *delay.lock().unwrap();
                        if !pause.is_zero() {
                            std::thread::sleep(pause);
                        }
                        let (status, payload) = handler(req.url(), &body);
                        counters.in_flight.fetch_sub(1, Ordering::SeqCst);
                        let resp = Response::from_string(payload.to_string())
                            .with_status_code(status)
                            .with_header(
                                Header::from_bytes("Content-Type", "application/json").unwrap(),
                            );
                        let _ = req.respond(resp);
                    }
                })
            })
            .collect();
        Self {
            server,
            counters,
            workers,
        }
    }

    fn url(&self) -> String {
        format!("http://{}", self.server.server_addr().to_ip().unwrap())
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

macro_rules! counter_accessors {
    () => {
        /// Base URL, e.g. `http://127.0.0.1:40123`.
        pub fn url(&self) -> String {
            self.inner.url()
        }

        pub fn requests(&self) -> usize {
            self.inner.counters.requests.load(Ordering::SeqCst)
        }

        pub fn peak_in_flight(&self) -> usize {
            self.inner.counters.peak.load(Ordering::SeqCst)
        }

        pub fn bodies(&self) -> Vec<Value> {
            self.inner.counters.bodies.lock().unwrap().clone()
        }

        /// `Authorization` header of each request, in arrival order.
        pub fn authorizations(&self) -> Vec<Option<String>> {
            self.inner.counters.auth.lock().unwrap().clone()
        }

        /// Holds every request for `d` before answering.
        pub fn set_delay(&self, d: Duration) {
            *self.delay.lock().unwrap() = d;
        }
    };
}

#[derive(Default)]
struct VlmScript {
    by_image: HashMap<String, String>,
    default: Option<String>,
    failing: HashSet<String>,
    /// Statuses returned (in order) before normal behaviour resumes.
    preamble: VecDeque<u16>,
    usage_tokens: Option<u64>,
}

/// Mock `POST /v1/chat/completions`. Completions are chosen by the SHA-256 of the
/// decoded image in the data URI.
pub struct MockVlm {
    inner: MockServer,
    script: Arc<Mutex<VlmScript>>,
    delay: Arc<Mutex<Duration>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_sha(body: &Value) -> Option<String> {
    let url = body.pointer("/messages/0/content")?.as_array()?.iter().find_map(|part| {
        (part.get("type")?.as_str()? == "image_url")
            .then(|| part.pointer("/image_url/url")?.as_str())
            .flatten()
    })?;
    let (_, b64) = url.split_once(";base64,")?;
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).ok()?;
    Some(sha256_hex(&bytes))
}

impl MockVlm {
    pub fn start() -> Self {
        let script = Arc::new(Mutex::new(VlmScript::default()));
        let s = Arc::clone(&script);
        let handler: Arc<Handler> = Arc::new(move |path, body| {
            if path != "/v1/chat/completions" {
                return (404, json!({"error": "not found"}));
            }
            let mut script = s.lock().unwrap();
            if let Some(status) = script.preamble.pop_front() {
                return (status, json!({"error": "scripted failure"}));
            }
            let Some(sha) = image_sha(body) else {
                return (400, json!({"error": "no image part"}));
            };
            if script.failing.contains(&sha) {
                return (500, json!({"error": "permanent failure"}));
            }
            let Some(text) = script.by_image.get(&sha).or(script.default.as_ref()).cloned() else {
                return (422, json!({"error": format!("no scripted completion for {sha}")}));
            };
            let mut resp = json!({
                "id": "mock",
                "object": "chat.completion",
                "model": body.get("model").cloned().unwrap_or(Value::Null),
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            });
            if let Some(n) = script.usage_tokens {
                resp["usage"] = json!({"prompt_tokens": 100, "completion_tokens": n, "total_tokens": 100 + n});
            }
            (200, resp)
        });
        let delay = Arc::new(Mutex::new(Duration::ZERO));
        Self {
            inner: MockServer::start(handler, Arc::clone(&delay)),
            script,
            delay,
        }
    }

    counter_accessors!();

    /// Scripts the completion for an image with the given bytes.
    pub fn respond_to(&self, image: &[u8], text: impl Into<String>) {
        self.script
            .lock()
            .unwrap()
            .by_image
            .insert(sha256_hex(image), text.into());
    }

    pub fn respond_by_sha(&self, sha: impl Into<String>, text: impl Into<String>) {
        self.script.lock().unwrap().by_image.insert(sha.into(), text.into());
    }

    /// Completion for images without a specific script.
    pub fn respond_default(&self, text: impl Into<String>) {
        self.script.lock().unwrap().default = Some(text.into());
    }

    /// Every request for this image answers HTTP 500.
    pub fn fail_image(&self, image: &[u8]) {
        self.script.lock().unwrap().failing.insert(sha256_hex(image));
    }

    /// The next requests answer with these statuses, in order.
    pub fn fail_next(&self, statuses: &[u16]) {
        self.script.lock().unwrap().preamble.extend(statuses);
    }

    /// Report `usage.completion_tokens` in every response.
    pub fn report_usage(&self, completion_tokens: Option<u64>) {
        self.script.lock().unwrap().usage_tokens = completion_tokens;
    }
}

#[derive(Default)]
struct EncoderScript {
    dense: HashMap<String, Vec<f64>>,
    sparse: HashMap<String, BTreeMap<String, f64>>,
    dim: usize,
    preamble: VecDeque<u16>,
    reverse_order: bool,
}

/// Mock `POST /v1/embeddings` and `POST /encode_sparse`.
///
/// Unscripted inputs get a deterministic pseudo-embedding derived from the
/// input's SHA-256 (dense) or its lowercase whitespace tokens (sparse).
pub struct MockEncoder {
    inner: MockServer,
    script: Arc<Mutex<EncoderScript>>,
    delay: Arc<Mutex<Duration>>,
}

fn hashed_vector(text: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    (0..dim)
        .map(|i| f64::from(digest[i % 32]) / 255.0 - 0.5 + (i / 32) as f64 * 0.01)
        .collect()
}

fn token_weights(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in text.split_whitespace() {
        *m.entry(t.to_lowercase()).or_insert(0.0) += 1.0;
    }
    m
}

impl MockEncoder {
    pub fn start(dim: usize) -> Self {
        let script = Arc::new(Mutex::new(EncoderScript {
            dim,
            ..Default::default()
        }));
        let s = Arc::clone(&script);
        let handler: Arc<Handler> = Arc::new(move |path, body| {
            let mut script = s.lock().unwrap();
            if let Some(status) = script.preamble.pop_front() {
                return (status, json!({"error": "scripted failure"}));
            }
            let Some(inputs) = body.get("input").and_then(Value::as_array) else {
                return (400, json!({"error": "missing input"}));
            };
            let inputs: Vec<String> = inputs
                .iter()
                .map(|v| v.as_str().unwrap_or_default().to_string())
                .collect();
            match path {
                "/v1/embeddings" => {
                    let mut data: Vec<Value> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let v = script
                                .dense
                                .get(t)
                                .cloned()
                                .unwrap_or_else(|| hashed_vector(t, script.dim));
                            json!({"object": "embedding", "index": i, "embedding": v})
                        })
                        .collect();
                    if script.reverse_order {
                        data.reverse();
                    }
                    (200, json!({"object": "list", "data": data, "model": body.get("model")}))
                }
                "/encode_sparse" => {
                    let sparse: Vec<Value> = inputs
                        .iter()
                        .map(|t| {
                            let m = script.sparse.get(t).cloned().unwrap_or_else(|| token_weights(t));
                            json!(m)
                        })
                        .collect();
                    (200, json!({"sparse": sparse}))
                }
                _ => (404, json!({"error": "not found"})),
            }
        });
        let delay = Arc::new(Mutex::new(Duration::ZERO));
        Self {
            inner: MockServer::start(handler, Arc::clone(&delay)),
            script,
            delay,
        }
    }

    counter_accessors!();

    pub fn dense(&self, text: impl Into<String>, vector: Vec<f64>) {
        self.script.lock().unwrap().dense.insert(text.into(), vector);
    }

    pub fn sparse(&self, text: impl Into<String>, weights: BTreeMap<String, f64>) {
        self.script.lock().unwrap().sparse.insert(text.into(), weights);
    }

    pub fn fail_next(&self, statuses: &[u16]) {
        self.script.lock().unwrap().preamble.extend(statuses);
    }

    /// Emit `data[]` in reverse order (indices stay correct).
    pub fn reverse_order(&self, on: bool) {
        self.script.lock().unwrap().reverse_order = on;
    }

    /// All `input` strings received so far, in arrival order.
    pub fn inputs(&self) -> Vec<String> {
        self.bodies()
            .iter()
            .filter_map(|b| b.get("input").and_then(Value::as_array).cloned())
            .flatten()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect()
    }
}

/// Brute-force reference implementations, written without the library's code paths.
pub mod oracle {
    use std::collections::{BTreeMap, BTreeSet};

    /// Sorts (id, score) by score descending then id ascending, keeps the first `k`.
    pub fn full_sort(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    /// Query scaled to unit length when `cosine` is set.
    pub fn prepare(query: &[f64], cosine: bool) -> Vec<f64> {
        if !cosine {
            return query.to_vec();
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        query.iter().map(|x| x / norm).collect()
    }

    /// Scores every stored row against an already prepared query.
    pub fn dense_scan(ids: &[String], rows: &[Vec<f32>], query: &[f64], k: usize) -> Vec<(String, f64)> {
        let scored = ids
            .iter()
            .zip(rows)
            .map(|(id, row)| {
                let mut s = 0.0f64;
                for (r, q) in row.iter().zip(query) {
                    s += f64::from(*r) * q;
                }
                (id.clone(), s)
            })
            .collect();
        full_sort(scored, k)
    }

    /// Dot product over the materialised term space, visiting terms in sorted order.
    pub fn sparse_scan(
        ids: &[String],
        docs: &[BTreeMap<String, f64>],
        query: &BTreeMap<String, f64>,
        k: usize,
    ) -> Vec<(String, f64)> {
        let vocab: BTreeSet<&String> = docs.iter().flat_map(|d| d.keys()).chain(query.keys()).collect();
        let scored = ids
            .iter()
            .zip(docs)
            .filter_map(|(id, doc)| {
                let mut s = 0.0f64;
                let mut shared = false;
                for t in &vocab {
                    if let (Some(q), Some(d)) = (query.get(*t), doc.get(*t)) {
                        if *q > 0.0 && *d > 0.0 {
                            s += q * d;
                            shared = true;
                        }
                    }
                }
                (shared && s > 0.0).then(|| (id.clone(), s))
            })
            .collect();
        full_sort(scored, k)
    }

    /// nDCG@k with linear gain, summed term by term.
    pub fn ndcg(ranking: &[&str], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
        let mut dcg = 0.0;
        for (pos, doc) in ranking.iter().take(k).enumerate() {
            let rel = judgments.get(*doc).copied().unwrap_or(0) as f64;
            dcg += rel / ((pos + 2) as f64).log2();
        }
        let mut ideal: Vec<u32> = judgments.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let mut idcg = 0.0;
        for (pos, rel) in ideal.iter().take(k).enumerate() {
            idcg += *rel as f64 / ((pos + 2) as f64).log2();
        }
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    }

    /// |relevant ∩ top-k| / |relevant|, via explicit sets.
    pub fn recall(ranking: &[&str], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
        let relevant: BTreeSet<&str> = judgments
            .iter()
            .filter(|(_, r)| **r > 0)
            .map(|(d, _)| d.as_str())
            .collect();
        if relevant.is_empty() {
            return 0.0;
        }
        let top: BTreeSet<&str> = ranking.iter().take(k).copied().collect();
        top.intersection(&relevant).count() as f64 / relevant.len() as f64
    }
}
