use std::path::{Path, PathBuf};
use std::time::Duration;

use serval_core::describe::{Provenance, DEFAULT_PROMPT};
use serval_core::model::sha256_hex;
use serval_core::{Describer, DescriptionCache, DocRef, Error, ErrorClass, PromptTemplate, Tokenizer, VlmEndpointConfig};
use serval_testkit::MockVlm;
use tempfile::TempDir;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn fake_png(tag: &str) -> Vec<u8> {
    let mut b = PNG_MAGIC.to_vec();
    b.extend_from_slice(tag.as_bytes());
    b
}

fn write_image(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn config(url: &str) -> VlmEndpointConfig {
    let mut cfg = VlmEndpointConfig::new(url, "mock-vlm");
    cfg.retry_base_delay_s = 0.001;
    cfg
}

fn describer(url: &str) -> Describer {
    Describer::new(config(url), PromptTemplate::default()).unwrap()
}

#[test]
fn completion_is_stored_verbatim_with_token_count() {
    let vlm = MockVlm::start();
    let dir = TempDir::new().unwrap();
    let img = fake_png("page-1");
    let path = write_image(dir.path(), "p1.png", &img);
    let text = "Summary: Q3 report.\nRevenue  grew 4.5% to $12.3M.\n";
    vlm.respond_to(&img, text);

    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let out = describer(&vlm.url()).describe(&DocRef::image("p1", path), &cache).unwrap();
    assert_eq!(out.source, Provenance::Generated);
    let d = out.description;
    assert_eq!(d.text, text);
    assert_eq!(d.token_count, Tokenizer::Whitespace.count(text));
    assert_eq!(d.token_count, 8);
    assert_eq!(d.model_id, "mock-vlm");
    assert_eq!(d.prompt_hash, sha256_hex(DEFAULT_PROMPT));
    assert_eq!(d.content_hash, sha256_hex(&img));
    assert!(d.gen_latency_s > 0.0);
}

#[test]
fn reported_usage_takes_precedence() {
    let vlm = MockVlm::start();
    vlm.respond_default("a b c");
    vlm.report_usage(Some(421));
    let dir = TempDir::new().unwrap();
    let path = write_image(dir.path(), "p.png", &fake_png("x"));
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let d = describer(&vlm.url()).describe(&DocRef::image("p", path), &cache).unwrap();
    assert_eq!(d.description.token_count, 421);
    assert_eq!(vlm.authorizations(), vec![None]);
}

#[test]
fn request_payload_shape() {
    let vlm = MockVlm::start();
    vlm.respond_default("ok");
    let dir = TempDir::new().unwrap();
    let img = fake_png("payload");
    let path = write_image(dir.path(), "p.png", &img);
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let mut cfg = config(&vlm.url());
    cfg.max_tokens = 777;
    Describer::new(cfg, PromptTemplate::default())
        .unwrap()
        .describe(&DocRef::image("p", path), &cache)
        .unwrap();

    let bodies = vlm.bodies();
    assert_eq!(bodies.len(), 1);
    let b = &bodies[0];
    assert_eq!(b["model"], "mock-vlm");
    assert_eq!(b["max_tokens"], 777);
    assert_eq!(b["temperature"], 0.0);
    let messages = b["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 1);
    assert_eq!(messages[0]["role"], "user");
    let parts = messages[0]["content"].as_array().unwrap();
    assert_eq!(parts.len(), 2);
    assert_eq!(parts[0]["type"], "image_url");
    let url = parts[0]["image_url"]["url"].as_str().unwrap();
    use base64::Engine;
    let expected = format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(&img)
    );
    assert_eq!(url, expected);
    assert_eq!(parts[1]["type"], "text");
    assert_eq!(parts[1]["text"], DEFAULT_PROMPT);
}

#[test]
fn cached_documents_issue_no_requests() {
    let vlm = MockVlm::start();
    vlm.respond_default("described");
    let dir = TempDir::new().unwrap();
    let docs: Vec<DocRef> = (0..4)
        .map(|i| {
            let p = write_image(dir.path(), &format!("p{i}.png"), &fake_png(&format!("img{i}")));
            DocRef::image(format!("d{i}"), p)
        })
        .collect();
    let cache_path = dir.path().join("d.jsonl");
    let first = {
        let cache = DescriptionCache::open(&cache_path).unwrap();
        describer(&vlm.url()).describe_corpus(&docs, &cache)
    };
    assert_eq!(first.summary.generated, 4);
    assert_eq!(vlm.requests(), 4);

    // reopen from disk, as a fresh process would
    let cache = DescriptionCache::open(&cache_path).unwrap();
    assert_eq!(cache.len(), 4);
    let second = describer(&vlm.url()).describe_corpus(&docs, &cache);
    assert_eq!(second.summary.cached, 4);
    assert_eq!(second.summary.generated, 0);
    assert_eq!(vlm.requests(), 4);
    let a: Vec<_> = first.described.iter().map(|d| &d.description).collect();
    let b: Vec<_> = second.described.iter().map(|d| &d.description).collect();
    assert_eq!(a, b);
}

#[test]
fn identical_images_share_a_cache_entry() {
    let vlm = MockVlm::start();
    vlm.respond_default("same");
    let dir = TempDir::new().unwrap();
    let img = fake_png("dup");
    let a = write_image(dir.path(), "a.png", &img);
    let b = write_image(dir.path(), "b.png", &img);
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let d = describer(&vlm.url());
    d.describe(&DocRef::image("a", a), &cache).unwrap();
    let hit = d.describe(&DocRef::image("b", b), &cache).unwrap();
    assert_eq!(hit.source, Provenance::Cached);
    assert_eq!(hit.description.doc_id, "b");
    assert_eq!(vlm.requests(), 1);
}

#[test]
fn prompt_or_model_change_misses_the_cache() {
    let vlm = MockVlm::start();
    vlm.respond_default("x");
    let dir = TempDir::new().unwrap();
    let doc = DocRef::image("p", write_image(dir.path(), "p.png", &fake_png("p")));
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    describer(&vlm.url()).describe(&doc, &cache).unwrap();
    Describer::new(config(&vlm.url()), PromptTemplate::new("Describe briefly."))
        .unwrap()
        .describe(&doc, &cache)
        .unwrap();
    let mut other = config(&vlm.url());
    other.model_id = "other-vlm".into();
    Describer::new(other, PromptTemplate::default())
        .unwrap()
        .describe(&doc, &cache)
        .unwrap();
    assert_eq!(vlm.requests(), 3);
    assert_eq!(cache.len(), 3);
}

#[test]
fn text_documents_bypass_the_endpoint() {
    let vlm = MockVlm::start();
    let dir = TempDir::new().unwrap();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let body = "already text, no image here";
    let out = describer(&vlm.url())
        .describe(&DocRef::text("t1", body), &cache)
        .unwrap();
    assert_eq!(out.source, Provenance::Copied);
    assert_eq!(out.description.text, body);
    assert_eq!(out.description.token_count, 5);
    assert_eq!(out.description.gen_latency_s, 0.0);
    assert_eq!(vlm.requests(), 0);
    assert_eq!(cache.len(), 0);
}

#[test]
fn transient_failures_are_retried() {
    let vlm = MockVlm::start();
    vlm.respond_default("after retries");
    vlm.fail_next(&[503, 429]);
    let dir = TempDir::new().unwrap();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let doc = DocRef::image("p", write_image(dir.path(), "p.png", &fake_png("r")));
    let d = describer(&vlm.url()).describe(&doc, &cache).unwrap();
    assert_eq!(d.description.text, "after retries");
    assert_eq!(vlm.requests(), 3);
}

#[test]
fn retries_are_bounded() {
    let vlm = MockVlm::start();
    vlm.fail_next(&[500; 10]);
    let dir = TempDir::new().unwrap();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let doc = DocRef::image("p", write_image(dir.path(), "p.png", &fake_png("r")));
    let mut cfg = config(&vlm.url());
    cfg.max_retries = 2;
    let err = Describer::new(cfg, PromptTemplate::default())
        .unwrap()
        .describe(&doc, &cache)
        .unwrap_err();
    assert!(matches!(err, Error::Endpoint { status: 500, .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Upstream);
    assert_eq!(vlm.requests(), 3);
    assert_eq!(cache.len(), 0);
}

#[test]
fn client_errors_are_not_retried() {
    let vlm = MockVlm::start();
    vlm.fail_next(&[400]);
    let dir = TempDir::new().unwrap();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let doc = DocRef::image("p", write_image(dir.path(), "p.png", &fake_png("r")));
    let err = describer(&vlm.url()).describe(&doc, &cache).unwrap_err();
    assert!(matches!(err, Error::Endpoint { status: 400, .. }));
    assert_eq!(vlm.requests(), 1);
}

#[test]
fn empty_completion_is_an_error_and_not_cached() {
    let vlm = MockVlm::start();
    vlm.respond_default("  \n");
    let dir = TempDir::new().unwrap();
    let cache_path = dir.path().join("d.jsonl");
    let cache = DescriptionCache::open(&cache_path).unwrap();
    let doc = DocRef::image("p", write_image(dir.path(), "p.png", &fake_png("e")));
    let err = describer(&vlm.url()).describe(&doc, &cache).unwrap_err();
    assert!(matches!(err, Error::EmptyDescription { ref doc_id } if doc_id == "p"));
    assert_eq!(cache.len(), 0);
    assert_eq!(DescriptionCache::open(&cache_path).unwrap().len(), 0);
}

#[test]
fn corpus_run_reports_failures_and_keeps_going() {
    let vlm = MockVlm::start();
    vlm.respond_default("fine");
    let dir = TempDir::new().unwrap();
    let mut docs = Vec::new();
    for i in 1..=4 {
        let img = fake_png(&format!("c{i}"));
        if i == 2 {
            vlm.fail_image(&img);
        }
        docs.push(DocRef::image(format!("d{i}"), write_image(dir.path(), &format!("{i}.png"), &img)));
    }
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let mut cfg = config(&vlm.url());
    cfg.max_retries = 1;
    let run = Describer::new(cfg, PromptTemplate::default())
        .unwrap()
        .describe_corpus(&docs, &cache);
    assert_eq!(run.summary.generated, 3);
    assert_eq!(run.summary.failed.len(), 1);
    assert_eq!(run.summary.failed[0].0, "d2");
    assert_eq!(run.summary.to_string(), "3 generated, 0 cached, 0 copied, 1 failed");
    assert_eq!(cache.len(), 3);
}

#[test]
fn concurrency_is_bounded() {
    let vlm = MockVlm::start();
    vlm.respond_default("slow");
    vlm.set_delay(Duration::from_millis(60));
    let dir = TempDir::new().unwrap();
    let docs: Vec<DocRef> = (0..8)
        .map(|i| DocRef::image(format!("d{i}"), write_image(dir.path(), &format!("{i}.png"), &fake_png(&i.to_string()))))
        .collect();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let mut cfg = config(&vlm.url());
    cfg.max_concurrency = 2;
    let run = Describer::new(cfg, PromptTemplate::default())
        .unwrap()
        .describe_corpus(&docs, &cache);
    assert_eq!(run.summary.generated, 8);
    assert!(vlm.peak_in_flight() <= 2, "peak {}", vlm.peak_in_flight());
    assert_eq!(vlm.peak_in_flight(), 2);
}

#[test]
fn missing_image_is_a_data_error() {
    let vlm = MockVlm::start();
    let dir = TempDir::new().unwrap();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let err = describer(&vlm.url())
        .describe(&DocRef::image("gone", dir.path().join("nope.png")), &cache)
        .unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    assert_eq!(vlm.requests(), 0);
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    let vlm = MockVlm::start();
    vlm.respond_default("ok");
    let dir = TempDir::new().unwrap();
    let cache = DescriptionCache::open(dir.path().join("d.jsonl")).unwrap();
    let mut cfg = config(&vlm.url());
    cfg.api_key = Some("sk-test".into());
    let doc = DocRef::image("p", write_image(dir.path(), "p.png", &fake_png("k")));
    Describer::new(cfg, PromptTemplate::default()).unwrap().describe(&doc, &cache).unwrap();
    assert_eq!(vlm.authorizations(), vec![Some("Bearer sk-test".to_string())]);
}
