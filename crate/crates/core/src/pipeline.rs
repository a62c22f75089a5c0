//! Pipeline stages: describe -> encode -> index -> search -> evaluate.
//!
//! Each stage reads what the previous one left in `cache_dir`/`index_dir`, so any
//! stage can be re-run on its own and completed work is never redone.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::{DatasetPaths, PipelineConfig};
use crate::describe::{bench_latency, token_stats, Describer, DescriptionCache, Provenance, SummaryStats};
use crate::describe::CorpusSummary;
use crate::encode::{read_sparse_jsonl, Embedding, EmbeddingCache, Encoder, EncoderKind, Role};
use crate::error::{Error, Result};
use crate::eval::{build_report, evaluate_run, render_table, DatasetEvaluation, MissingQueryPolicy, ReportJson, TableRow};
use crate::formats::{read_corpus, read_qrels, read_queries, read_run, write_run};
use crate::index::{DenseIndex, SparseIndex};
use crate::model::{validate_corpus, DocRef, MetricReport, MetricSpec, Qrels, Query, RunList, SparseVector, ValidationReport};

pub const DESCRIPTION_CACHE_FILE: &str = "descriptions.jsonl";
pub const EMBEDDING_CACHE_FILE: &str = "embeddings.jsonl";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub docs: Vec<DocRef>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub validation: ValidationReport,
}

#[derive(Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeSummary {
    pub role: Role,
    pub total: usize,
    /// Texts sent to the encoder (cache misses).
    pub encoded: usize,
    /// True when vectors come from a precomputed file.
    pub precomputed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSummary {
    pub path: PathBuf,
    pub docs: usize,
    pub kind: EncoderKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSummary {
    pub path: PathBuf,
    pub queries: usize,
    pub encoded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsOutput {
    pub stats: SummaryStats,
    /// Image documents without a cached description.
    pub missing: usize,
}

/// Replaces characters that cannot appear in a TREC tag or a file name.
fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_whitespace() || c == '/' || c == '\\' { '_' } else { c })
        .collect()
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// `<vlm model>+<encoder model>`, identifying the run's table row.
    pub fn run_tag(&self) -> String {
        format!("{}+{}", sanitize(&self.cfg.vlm.model_id), sanitize(&self.cfg.encoder.model_id))
    }

    pub fn index_path(&self, dataset: &str) -> PathBuf {
        let ext = match self.cfg.encoder.kind {
            EncoderKind::Dense => "srvd",
            EncoderKind::Sparse => "srvs",
        };
        self.cfg
            .index_dir
            .join(sanitize(dataset))
            .join(format!("{}.{ext}", self.run_tag()))
    }

    pub fn default_run_path(&self, dataset: &str) -> PathBuf {
        self.cfg
            .index_dir
            .join(sanitize(dataset))
            .join(format!("{}.run", self.run_tag()))
    }

    pub fn description_cache(&self) -> Result<DescriptionCache> {
        DescriptionCache::open(self.cfg.cache_dir.join(DESCRIPTION_CACHE_FILE))
    }

    pub fn embedding_cache(&self) -> Result<EmbeddingCache> {
        EmbeddingCache::open(self.cfg.cache_dir.join(EMBEDDING_CACHE_FILE))
    }

    fn describer(&self) -> Result<Describer> {
        Describer::new(self.cfg.vlm.clone(), self.cfg.prompt.clone())
    }

    fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.cfg.encoder.clone())
    }

    fn paths(&self, dataset: &str) -> Result<&DatasetPaths> {
        self.cfg.dataset(dataset)
    }

    /// Loads and validates a dataset. Duplicate ids are fatal; other findings are
    /// logged as warnings and kept in [`Dataset::validation`].
    pub fn load_dataset(&self, name: &str) -> Result<Dataset> {
        let paths = self.paths(name)?;
        let docs = read_corpus(&paths.corpus_path)?;
        let queries = read_queries(&paths.queries_path)?;
        let qrels = read_qrels(&paths.qrels_path)?;
        let validation = validate_corpus(&docs, &queries, &qrels)?;
        for line in validation.to_string().lines().filter(|l| l.starts_with("warning")) {
            warn!("{name}: {line}");
        }
        Ok(Dataset {
            name: name.to_string(),
            docs,
            queries,
            qrels,
            validation,
        })
    }

    pub fn validate(&self, dataset: &str) -> Result<ValidationReport> {
        Ok(self.load_dataset(dataset)?.validation)
    }

    /// Generates missing descriptions for the dataset's images (the first `limit`
    /// documents only, when given).
    pub fn describe(&self, dataset: &str, limit: Option<usize>) -> Result<CorpusSummary> {
        let ds = self.load_dataset(dataset)?;
        let describer = self.describer()?;
        let cache = self.description_cache()?;
        let docs = match limit {
            Some(n) => &ds.docs[..n.min(ds.docs.len())],
            None => &ds.docs[..],
        };
        let run = describer.describe_corpus(docs, &cache);
        info!("{dataset}: {}", run.summary);
        Ok(run.summary)
    }

    /// Description text for every document, without contacting the VLM.
    fn document_texts(&self, ds: &Dataset) -> Result<Vec<String>> {
        let describer = self.describer()?;
        let cache = self.description_cache()?;
        let mut texts = Vec::with_capacity(ds.docs.len());
        let mut missing = Vec::new();
        for doc in &ds.docs {
            match describer.lookup(doc, &cache)? {
                Some(d) => texts.push(d.description.text),
                None => missing.push(doc.doc_id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingDescriptions(missing));
        }
        Ok(texts)
    }

    fn query_texts(ds: &Dataset) -> Vec<String> {
        ds.queries.iter().map(|q| q.text.clone()).collect()
    }

    /// Fills the embedding cache for the given roles.
    pub fn encode(&self, dataset: &str, roles: &[Role]) -> Result<Vec<EncodeSummary>> {
        let ds = self.load_dataset(dataset)?;
        let paths = self.paths(dataset)?;
        let encoder = self.encoder()?;
        let cache = self.embedding_cache()?;
        let mut out = Vec::new();
        for &role in roles {
            let precomputed = match role {
                Role::Query => paths.sparse_queries_path.is_some(),
                Role::Document => paths.sparse_docs_path.is_some(),
            } && self.cfg.encoder.kind == EncoderKind::Sparse;
            let total = match role {
                Role::Query => ds.queries.len(),
                Role::Document => ds.docs.len(),
            };
            if precomputed || total == 0 {
                out.push(EncodeSummary {
                    role,
                    total,
                    encoded: 0,
                    precomputed,
                });
                continue;
            }
            let texts = match role {
                Role::Query => Self::query_texts(&ds),
                Role::Document => self.document_texts(&ds)?,
            };
            let (_, encoded) = encoder.encode_cached(&texts, role, &cache)?;
            info!("{dataset}: encoded {encoded} of {total} {role} texts");
            out.push(EncodeSummary {
                role,
                total,
                encoded,
                precomputed: false,
            });
        }
        Ok(out)
    }

    fn cached_embeddings(&self, texts: &[String], ids: &[String], role: Role) -> Result<Vec<Embedding>> {
        let encoder = self.encoder()?;
        let cache = self.embedding_cache()?;
        let found = encoder.lookup_cached(texts, role, &cache)?;
        let missing: Vec<String> = found
            .iter()
            .zip(ids)
            .filter(|(e, _)| e.is_none())
            .map(|(_, id)| id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings(missing));
        }
        Ok(found.into_iter().map(Option::unwrap).collect())
    }

    fn precomputed_sparse(path: &Path, ids: &[String]) -> Result<Vec<SparseVector>> {
        let mut vectors = read_sparse_jsonl(path)?;
        let missing: Vec<String> = ids.iter().filter(|id| !vectors.contains_key(*id)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings(missing));
        }
        Ok(ids.iter().map(|id| vectors.remove(id).unwrap()).collect())
    }

    /// Builds the dataset's index from cached document embeddings and saves it.
    pub fn index(&self, dataset: &str) -> Result<IndexSummary> {
        let ds = self.load_dataset(dataset)?;
        let paths = self.paths(dataset)?;
        let ids: Vec<String> = ds.docs.iter().map(|d| d.doc_id.clone()).collect();
        let path = self.index_path(dataset);
        match self.cfg.encoder.kind {
            EncoderKind::Dense => {
                let texts = self.document_texts(&ds)?;
                let vectors = self
                    .cached_embeddings(&texts, &ids, Role::Document)?
                    .into_iter()
                    .map(|e| e.into_dense().expect("dense encoder"))
                    .collect::<Vec<_>>();
                DenseIndex::build(ids, &vectors, self.cfg.encoder.similarity)?.save(&path)?;
            }
            EncoderKind::Sparse => {
                let vectors = match &paths.sparse_docs_path {
                    Some(p) => Self::precomputed_sparse(p, &ids)?,
                    None => {
                        let texts = self.document_texts(&ds)?;
                        self.cached_embeddings(&texts, &ids, Role::Document)?
                            .into_iter()
                            .map(|e| e.into_sparse().expect("sparse encoder"))
                            .collect()
                    }
                };
                SparseIndex::build(ids, &vectors)?.save(&path)?;
            }
        }
        Ok(IndexSummary {
            path,
            docs: ds.docs.len(),
            kind: self.cfg.encoder.kind,
        })
    }

    /// Ranks every query against the saved index, `top_k_retrieve` deep, and
    /// writes a TREC run file. Query embeddings missing from the cache are encoded.
    pub fn search(&self, dataset: &str, output: Option<&Path>) -> Result<SearchSummary> {
        let ds = self.load_dataset(dataset)?;
        let paths = self.paths(dataset)?;
        let k = self.cfg.top_k_retrieve;
        let qids: Vec<String> = ds.queries.iter().map(|q| q.query_id.clone()).collect();
        let index_path = self.index_path(dataset);
        let mut encoded = 0;

        let query_embeddings = |encoded: &mut usize| -> Result<Vec<Embedding>> {
            if ds.queries.is_empty() {
                return Ok(Vec::new());
            }
            let (e, n) = self
                .encoder()?
                .encode_cached(&Self::query_texts(&ds), Role::Query, &self.embedding_cache()?)?;
            *encoded = n;
            Ok(e)
        };

        let rankings = match self.cfg.encoder.kind {
            EncoderKind::Dense => {
                let index = DenseIndex::load(&index_path)?;
                query_embeddings(&mut encoded)?
                    .into_iter()
                    .map(|e| index.search(&e.into_dense().expect("dense encoder"), k))
                    .collect::<Result<Vec<_>>>()?
            }
            EncoderKind::Sparse => {
                let index = SparseIndex::load(&index_path)?;
                let vectors: Vec<SparseVector> = match &paths.sparse_queries_path {
                    Some(p) => Self::precomputed_sparse(p, &qids)?,
                    None => query_embeddings(&mut encoded)?
                        .into_iter()
                        .map(|e| e.into_sparse().expect("sparse encoder"))
                        .collect(),
                };
                vectors.iter().map(|v| index.search(v, k)).collect()
            }
        };

        let runs = qids
            .into_iter()
            .zip(rankings)
            .map(|(q, r)| RunList::new(q, r))
            .collect::<Result<Vec<_>>>()?;
        let path = output.map(Path::to_path_buf).unwrap_or_else(|| self.default_run_path(dataset));
        write_run_file(&path, &runs, &self.run_tag())?;
        Ok(SearchSummary {
            path,
            queries: runs.len(),
            encoded,
        })
    }

    fn image_docs(ds: &Dataset) -> Vec<DocRef> {
        ds.docs.iter().filter(|d| d.is_image()).cloned().collect()
    }

    /// Token statistics over the cached descriptions of the dataset's images.
    pub fn stats(&self, dataset: &str) -> Result<StatsOutput> {
        let ds = self.load_dataset(dataset)?;
        let describer = self.describer()?;
        let cache = self.description_cache()?;
        let mut found = Vec::new();
        let mut missing = 0;
        for doc in Self::image_docs(&ds) {
            match describer.lookup(&doc, &cache)? {
                Some(d) => found.push(d.description),
                None => missing += 1,
            }
        }
        Ok(StatsOutput {
            stats: token_stats(&found)?,
            missing,
        })
    }

    /// Mean generation latency of the dataset's image descriptions. With `fresh`,
    /// missing descriptions are generated now and only those are measured.
    pub fn bench_latency(&self, dataset: &str, fresh: bool) -> Result<StatsOutput> {
        let ds = self.load_dataset(dataset)?;
        let describer = self.describer()?;
        let cache = self.description_cache()?;
        let docs = Self::image_docs(&ds);
        if fresh {
            let run = describer.describe_corpus(&docs, &cache);
            if let Some((doc, e)) = run.summary.failed.into_iter().next() {
                warn!("{dataset}: description of {doc} failed: {e}");
                return Err(e);
            }
            let generated: Vec<_> = run
                .described
                .into_iter()
                .filter(|d| d.source == Provenance::Generated)
                .map(|d| d.description)
                .collect();
            if generated.is_empty() {
                return Err(Error::EmptyInput(
                    "no description was generated in this run (all cached); fresh latency needs uncached documents",
                ));
            }
            return Ok(StatsOutput {
                stats: bench_latency(&generated)?,
                missing: 0,
            });
        }
        let mut found = Vec::new();
        let mut missing = 0;
        for doc in &docs {
            match describer.lookup(doc, &cache)? {
                Some(d) => found.push(d.description),
                None => missing += 1,
            }
        }
        Ok(StatsOutput {
            stats: bench_latency(&found)?,
            missing,
        })
    }
}

fn write_run_file(path: &Path, runs: &[RunList], tag: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_run(&mut w, runs, tag)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// One dataset's run and judgments.
#[derive(Debug, Clone)]
pub struct EvalInput {
    pub dataset: String,
    pub run_path: PathBuf,
    pub qrels_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct EvaluationOutput {
    pub datasets: BTreeMap<String, DatasetEvaluation>,
    pub report: MetricReport,
    pub json: ReportJson,
    /// One aligned table per metric, keyed by metric name.
    pub tables: BTreeMap<String, String>,
}

/// Evaluates runs against qrels and builds the report and per-metric tables. Table
/// rows are keyed by the run tag, split into VLM and encoder at the first `+`.
pub fn evaluate(inputs: &[EvalInput], spec: &MetricSpec, missing: MissingQueryPolicy) -> Result<EvaluationOutput> {
    let mut datasets = BTreeMap::new();
    let mut tags: HashMap<String, String> = HashMap::new();
    for input in inputs {
        let run = read_run(&input.run_path)?;
        let qrels = read_qrels(&input.qrels_path)?;
        let eval = evaluate_run(&run.runs, &qrels, spec, missing).map_err(|e| match e {
            Error::NoEvaluableQueries(m) => Error::NoEvaluableQueries(format!("{}: {m}", input.dataset)),
            e => e,
        })?;
        if datasets.insert(input.dataset.clone(), eval).is_some() {
            return Err(Error::DuplicateId {
                kind: "dataset",
                id: input.dataset.clone(),
            });
        }
        tags.insert(input.dataset.clone(), run.tag.unwrap_or_else(|| "run".into()));
    }
    let report = build_report(&datasets)?;
    let json = ReportJson::new(&report, &datasets);

    let names: Vec<String> = datasets.keys().cloned().collect();
    let mut tables = BTreeMap::new();
    for metric in spec.metric_names() {
        let mut rows: BTreeMap<String, crate::eval::TableRow> = BTreeMap::new();
        for (ds, eval) in &datasets {
            let tag = &tags[ds];
            let (vlm, enc) = tag.split_once('+').unwrap_or((tag.as_str(), "-"));
            rows.entry(tag.clone())
                .or_insert_with(|| TableRow {
                    vlm: vlm.to_string(),
                    encoder: enc.to_string(),
                    values: BTreeMap::new(),
                })
                .values
                .insert(ds.clone(), eval.means[&metric]);
        }
        let rows: Vec<TableRow> = rows.into_values().collect();
        tables.insert(metric, render_table(&rows, &names));
    }
    Ok(EvaluationOutput {
        datasets,
        report,
        json,
        tables,
    })
}
