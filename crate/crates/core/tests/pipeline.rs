use std::path::Path;

use serval_core::formats::read_run;
use serval_core::pipeline::{evaluate, EvalInput};
use serval_core::{EncoderKind, MetricSpec, MissingQueryPolicy, Pipeline, PipelineConfig, Role};
use serval_testkit::{MockEncoder, MockVlm};
use tempfile::TempDir;

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

/// Three text documents (no VLM needed) and two queries.
fn text_dataset(dir: &Path) {
    write(
        dir,
        "corpus.jsonl",
        concat!(
            "{\"_id\":\"a\",\"text\":\"solar panels on the roof\"}\n",
            "{\"_id\":\"b\",\"text\":\"quarterly revenue grew\"}\n",
            "{\"_id\":\"c\",\"text\":\"revenue from solar\"}\n",
        ),
    );
    write(
        dir,
        "queries.jsonl",
        "{\"_id\":\"q1\",\"text\":\"solar\"}\n{\"_id\":\"q2\",\"text\":\"revenue growth\"}\n",
    );
    write(dir, "qrels.tsv", "q1\ta\t1\nq2\tb\t1\n");
}

fn config(dir: &Path, vlm: &str, enc: &str, extra: &str) -> PipelineConfig {
    let text = format!(
        r#"
top_k_retrieve = 10
[vlm]
base_url = "{vlm}"
model_id = "vlm"
[encoder]
base_url = "{enc}"
model_id = "splade"
kind = "sparse"
retry_base_delay_s = 0.001
[datasets.t]
corpus_path = "corpus.jsonl"
queries_path = "queries.jsonl"
qrels_path = "qrels.tsv"
{extra}
"#
    );
    PipelineConfig::from_toml(&text, dir, &[]).unwrap()
}

#[test]
fn sparse_pipeline_over_text_documents() {
    let dir = TempDir::new().unwrap();
    text_dataset(dir.path());
    let vlm = MockVlm::start();
    let enc = MockEncoder::start(0);
    let p = Pipeline::new(config(dir.path(), &vlm.url(), &enc.url(), ""));
    assert_eq!(p.config().encoder.kind, EncoderKind::Sparse);

    let summary = p.describe("t", None).unwrap();
    assert_eq!(summary.copied, 3);
    let encoded = p.encode("t", &[Role::Document, Role::Query]).unwrap();
    assert_eq!(encoded[0].encoded, 3);
    assert_eq!(encoded[1].encoded, 2);
    p.index("t").unwrap();
    let s = p.search("t", None).unwrap();
    assert_eq!(s.encoded, 0, "query vectors come from the cache");
    assert_eq!(vlm.requests(), 0);

    let run = read_run(&s.path).unwrap();
    assert_eq!(run.tag.as_deref(), Some("vlm+splade"));
    let q1: Vec<&str> = run.runs[0].ranking().iter().map(|d| d.doc_id.as_str()).collect();
    // the mock weights whitespace tokens by count; "b" shares no term with "solar"
    assert_eq!(q1, ["a", "c"]);
    // b and c tie on "revenue"; the smaller id ranks first
    let q2: Vec<&str> = run.runs[1].ranking().iter().map(|d| d.doc_id.as_str()).collect();
    assert_eq!(q2, ["b", "c"]);

    let out = evaluate(
        &[EvalInput {
            dataset: "t".into(),
            run_path: s.path.clone(),
            qrels_path: dir.path().join("qrels.tsv"),
        }],
        &MetricSpec::default(),
        MissingQueryPolicy::Zero,
    )
    .unwrap();
    assert_eq!(out.json.datasets["t"].metrics["ndcg@1"], 1.0);
}

#[test]
fn precomputed_sparse_vectors_skip_the_encoder() {
    let dir = TempDir::new().unwrap();
    text_dataset(dir.path());
    write(
        dir.path(),
        "docs.sparse.jsonl",
        concat!(
            "{\"_id\":\"a\",\"sparse\":{\"sun\":2.0}}\n",
            "{\"_id\":\"b\",\"sparse\":{\"money\":1.5,\"sun\":0.25}}\n",
            "{\"_id\":\"c\",\"sparse\":{}}\n",
        ),
    );
    write(
        dir.path(),
        "queries.sparse.jsonl",
        "{\"_id\":\"q1\",\"sparse\":{\"sun\":1.0}}\n{\"_id\":\"q2\",\"sparse\":{\"money\":2.0}}\n",
    );
    let enc = MockEncoder::start(0);
    let p = Pipeline::new(config(
        dir.path(),
        "http://127.0.0.1:1",
        &enc.url(),
        "sparse_docs_path = \"docs.sparse.jsonl\"\nsparse_queries_path = \"queries.sparse.jsonl\"",
    ));
    let encoded = p.encode("t", &[Role::Document, Role::Query]).unwrap();
    assert!(encoded.iter().all(|e| e.precomputed && e.encoded == 0));
    p.index("t").unwrap();
    let s = p.search("t", None).unwrap();
    assert_eq!(enc.requests(), 0);

    let run = read_run(&s.path).unwrap();
    let scores: Vec<Vec<(String, f64)>> = run
        .runs
        .iter()
        .map(|r| r.ranking().iter().map(|d| (d.doc_id.clone(), d.score)).collect())
        .collect();
    assert_eq!(
        scores,
        vec![
            vec![("a".to_string(), 2.0), ("b".to_string(), 0.25)],
            vec![("b".to_string(), 3.0)],
        ]
    );
}

#[test]
fn precomputed_file_missing_a_document_is_reported() {
    let dir = TempDir::new().unwrap();
    text_dataset(dir.path());
    write(dir.path(), "docs.sparse.jsonl", "{\"_id\":\"a\",\"sparse\":{\"x\":1.0}}\n");
    let p = Pipeline::new(config(
        dir.path(),
        "http://127.0.0.1:1",
        "http://127.0.0.1:1",
        "sparse_docs_path = \"docs.sparse.jsonl\"",
    ));
    let err = p.index("t").unwrap_err();
    assert!(err.to_string().contains('b') && err.to_string().contains('c'), "{err}");
}
