//! Domain types shared by every stage of the pipeline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DocSource {
    Image(PathBuf),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocRef {
    pub doc_id: String,
    pub source: DocSource,
}

impl DocRef {
    pub fn image(doc_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            doc_id: doc_id.into(),
            source: DocSource::Image(path.into()),
        }
    }

    pub fn text(doc_id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            source: DocSource::Text(body.into()),
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self.source, DocSource::Image(_))
    }

    /// Bytes hashed into the description cache key: the image file or the text body.
    pub fn content_bytes(&self) -> Result<Vec<u8>> {
        match &self.source {
            DocSource::Image(path) => std::fs::read(path).map_err(|e| Error::io(path, e)),
            DocSource::Text(body) => Ok(body.as_bytes().to_vec()),
        }
    }

    pub(crate) fn resolve_against(&mut self, base: &Path) {
        if let DocSource::Image(path) = &mut self.source {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub query_id: String,
    pub text: String,
}

/// Graded relevance judgments, `query_id -> doc_id -> rel`.
///
/// A document counts as relevant iff `rel > 0`; grades are kept for nDCG gain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a judgment. A later judgment for the same pair replaces the earlier one.
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, rel: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), rel);
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn rel(&self, query_id: &str, doc_id: &str) -> u32 {
        self.get(query_id)
            .and_then(|j| j.get(doc_id).copied())
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, r)| (q.as_str(), d.as_str(), *r)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }
}

impl FromIterator<(String, String, u32)> for Qrels {
    fn from_iter<T: IntoIterator<Item = (String, String, u32)>>(iter: T) -> Self {
        let mut qrels = Qrels::new();
        for (q, d, r) in iter {
            qrels.insert(q, d, r);
        }
        qrels
    }
}

/// A generated (or, for text sources, copied) document description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub doc_id: String,
    pub model_id: String,
    pub prompt_hash: String,
    pub content_hash: String,
    pub text: String,
    pub token_count: u64,
    pub gen_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DescriptionKey {
    pub model_id: String,
    pub prompt_hash: String,
    pub content_hash: String,
}

impl Description {
    pub fn key(&self) -> DescriptionKey {
        DescriptionKey {
            model_id: self.model_id.clone(),
            prompt_hash: self.prompt_hash.clone(),
            content_hash: self.content_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at position {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit L2 norm. A zero vector has no direction and is rejected.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.l2_norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidInput(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        Ok(Self(self.0.iter().map(|v| v / norm).collect()))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Term-weight map. Only strictly positive weights are stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct SparseVector(BTreeMap<String, f64>);

impl SparseVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vector, dropping zero, negative and non-finite weights.
    pub fn from_weights<I, S>(weights: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self(
            weights
                .into_iter()
                .filter(|(_, w)| w.is_finite() && *w > 0.0)
                .map(|(t, w)| (t.into(), w))
                .collect(),
        )
    }

    pub fn get(&self, term: &str) -> Option<f64> {
        self.0.get(term).copied()
    }

    /// Entries in ascending term order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(t, w)| (t.as_str(), *w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<BTreeMap<String, f64>> for SparseVector {
    fn from(map: BTreeMap<String, f64>) -> Self {
        Self::from_weights(map)
    }
}

impl From<SparseVector> for BTreeMap<String, f64> {
    fn from(v: SparseVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

impl ScoredDoc {
    pub fn new(doc_id: impl Into<String>, score: f64) -> Self {
        Self {
            doc_id: doc_id.into(),
            score,
        }
    }
}

/// Ranking order: score descending, then doc id ascending.
pub fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// One query's ranking, always in [`rank_order`] with unique doc ids and finite scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RunList {
    query_id: String,
    ranking: Vec<ScoredDoc>,
}

impl RunList {
    pub fn new(query_id: impl Into<String>, mut ranking: Vec<ScoredDoc>) -> Result<Self> {
        let query_id = query_id.into();
        if let Some(d) = ranking.iter().find(|d| !d.score.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: non-finite score for {}",
                d.doc_id
            )));
        }
        let mut seen = HashSet::with_capacity(ranking.len());
        for d in &ranking {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "ranked doc",
                    id: format!("{query_id}/{}", d.doc_id),
                });
            }
        }
        for d in &mut ranking {
            // -0.0 and 0.0 must tie.
            if d.score == 0.0 {
                d.score = 0.0;
            }
        }
        ranking.sort_by(rank_order);
        Ok(Self { query_id, ranking })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn ranking(&self) -> &[ScoredDoc] {
        &self.ranking
    }

    pub fn len(&self) -> usize {
        self.ranking.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranking.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MetricSpec {
    cutoffs: BTreeSet<usize>,
}

impl MetricSpec {
    pub fn new(cutoffs: impl IntoIterator<Item = usize>) -> Result<Self> {
        let cutoffs: BTreeSet<usize> = cutoffs.into_iter().collect();
        if cutoffs.is_empty() {
            return Err(Error::Config("metric cutoffs must not be empty".into()));
        }
        if cutoffs.contains(&0) {
            return Err(Error::Config("metric cutoffs must be positive".into()));
        }
        Ok(Self { cutoffs })
    }

    pub fn cutoffs(&self) -> impl Iterator<Item = usize> + '_ {
        self.cutoffs.iter().copied()
    }

    pub fn max_cutoff(&self) -> usize {
        *self.cutoffs.last().expect("non-empty by construction")
    }

    /// Metric names in display order: all nDCG cutoffs, then all Recall cutoffs.
    pub fn metric_names(&self) -> Vec<String> {
        let ndcg = self.cutoffs().map(|k| format!("ndcg@{k}"));
        let recall = self.cutoffs().map(|k| format!("recall@{k}"));
        ndcg.chain(recall).collect()
    }
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self::new([1, 5, 10]).unwrap()
    }
}

impl TryFrom<Vec<usize>> for MetricSpec {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MetricSpec> for Vec<usize> {
    fn from(spec: MetricSpec) -> Self {
        spec.cutoffs.into_iter().collect()
    }
}

/// Per-dataset metric values plus their unweighted macro average.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub per_dataset: BTreeMap<String, BTreeMap<String, f64>>,
    pub macro_avg: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    /// Judgments whose query or document is absent from the loaded collection.
    pub unknown_judgments: Vec<(String, String)>,
    /// `(doc_id, path, reason)` for image documents that cannot be read.
    pub unreadable_images: Vec<(String, PathBuf, String)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.unknown_judgments.is_empty() && self.unreadable_images.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return writeln!(f, "ok: no issues found");
        }
        for (q, d) in &self.unknown_judgments {
            writeln!(f, "warning: qrels judge unknown pair ({q}, {d})")?;
        }
        for (d, p, why) in &self.unreadable_images {
            writeln!(f, "warning: document {d}: cannot read {}: {why}", p.display())?;
        }
        Ok(())
    }
}

/// Checks a loaded collection for consistency.
///
/// Duplicate document or query ids are fatal. Judgments that reference ids outside
/// the collection and unreadable image files are reported as warnings.
pub fn validate_corpus(docs: &[DocRef], queries: &[Query], qrels: &Qrels) -> Result<ValidationReport> {
    let mut doc_ids = HashSet::with_capacity(docs.len());
    for d in docs {
        if !doc_ids.insert(d.doc_id.as_str()) {
            return Err(Error::DuplicateId {
                kind: "document",
                id: d.doc_id.clone(),
            });
        }
    }
    let mut query_ids = HashSet::with_capacity(queries.len());
    for q in queries {
        if !query_ids.insert(q.query_id.as_str()) {
            return Err(Error::DuplicateId {
                kind: "query",
                id: q.query_id.clone(),
            });
        }
    }

    let mut report = ValidationReport::default();
    for (q, d, _) in qrels.iter() {
        if !query_ids.contains(q) || !doc_ids.contains(d) {
            report.unknown_judgments.push((q.to_string(), d.to_string()));
        }
    }
    for d in docs {
        if let DocSource::Image(path) = &d.source {
            if let Err(e) = std::fs::File::open(path) {
                report
                    .unreadable_images
                    .push((d.doc_id.clone(), path.clone(), e.to_string()));
            }
        }
    }
    Ok(report)
}
