//! nDCG@k and Recall@k, per-dataset means and macro averages.
//!
//! nDCG uses linear gain, `rel / log2(rank + 1)`, the `trec_eval ndcg_cut`
//! convention. Under binary judgments it coincides with exponential gain.
//! Queries without a positive judgment are excluded from means.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MetricReport, MetricSpec, Qrels, RunList, ScoredDoc};

/// How to treat a judged query for which the run has no ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingQueryPolicy {
    /// Every metric is 0 for that query.
    #[default]
    Zero,
    /// The query is left out of the mean and counted as skipped.
    Skip,
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    ((rank + 1) as f64).log2()
}

/// nDCG@k of `ranking` against one query's judgments. Unjudged documents have
/// gain 0. Returns 0 when there is no positive judgment.
pub fn ndcg_at_k(ranking: &[ScoredDoc], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|r| *r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, r)| f64::from(*r) / discount(i + 1))
        .sum();
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| f64::from(judgments.get(&d.doc_id).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    dcg / idcg
}

/// Fraction of the relevant (`rel > 0`) documents found in the top `k`.
pub fn recall_at_k(ranking: &[ScoredDoc], judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
    let relevant = judgments.values().filter(|r| **r > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|d| judgments.get(&d.doc_id).is_some_and(|r| *r > 0))
        .count();
    found as f64 / relevant as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerQueryMetrics {
    pub query_id: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    pub per_query: Vec<PerQueryMetrics>,
    /// Arithmetic mean over evaluated queries, per metric name.
    pub means: BTreeMap<String, f64>,
    /// Judged queries excluded from the means.
    pub skipped_queries: usize,
}

fn metrics_for(ranking: &[ScoredDoc], judgments: &BTreeMap<String, u32>, spec: &MetricSpec) -> BTreeMap<String, f64> {
    let mut values = BTreeMap::new();
    for k in spec.cutoffs() {
        values.insert(format!("ndcg@{k}"), ndcg_at_k(ranking, judgments, k));
        values.insert(format!("recall@{k}"), recall_at_k(ranking, judgments, k));
    }
    values
}

/// Scores every judged query of one dataset.
pub fn evaluate_run(
    runs: &[RunList],
    qrels: &Qrels,
    spec: &MetricSpec,
    missing: MissingQueryPolicy,
) -> Result<DatasetEvaluation> {
    let mut by_query: HashMap<&str, &RunList> = HashMap::with_capacity(runs.len());
    for run in runs {
        if by_query.insert(run.query_id(), run).is_some() {
            return Err(Error::DuplicateId {
                kind: "run query",
                id: run.query_id().to_string(),
            });
        }
    }

    let mut per_query = Vec::new();
    let mut skipped = 0;
    for query_id in qrels.query_ids() {
        let judgments = qrels.get(query_id).expect("listed query");
        if !judgments.values().any(|r| *r > 0) {
            skipped += 1;
            continue;
        }
        let ranking = match by_query.get(query_id) {
            Some(run) => run.ranking(),
            None if missing == MissingQueryPolicy::Skip => {
                skipped += 1;
                continue;
            }
            None => &[],
        };
        per_query.push(PerQueryMetrics {
            query_id: query_id.to_string(),
            values: metrics_for(ranking, judgments, spec),
        });
    }
    if per_query.is_empty() {
        return Err(Error::NoEvaluableQueries(format!(
            "{} judged queries, none with a positive judgment and a usable ranking",
            qrels.num_queries()
        )));
    }

    let n = per_query.len() as f64;
    let means = spec
        .metric_names()
        .into_iter()
        .map(|m| {
            let sum: f64 = per_query.iter().map(|q| q.values[&m]).sum();
            (m, sum / n)
        })
        .collect();
    Ok(DatasetEvaluation {
        per_query,
        means,
        skipped_queries: skipped,
    })
}

/// Unweighted mean over datasets.
pub fn macro_average(per_dataset: &BTreeMap<String, f64>) -> Result<f64> {
    if per_dataset.is_empty() {
        return Err(Error::EmptyInput("macro average needs at least one dataset"));
    }
    Ok(per_dataset.values().sum::<f64>() / per_dataset.len() as f64)
}

/// Assembles per-dataset means into a [`MetricReport`] with macro averages for
/// every metric present in all datasets.
pub fn build_report(datasets: &BTreeMap<String, DatasetEvaluation>) -> Result<MetricReport> {
    let per_dataset: BTreeMap<String, BTreeMap<String, f64>> = datasets
        .iter()
        .map(|(name, e)| (name.clone(), e.means.clone()))
        .collect();
    let first = per_dataset
        .values()
        .next()
        .ok_or(Error::EmptyInput("report needs at least one dataset"))?;
    let mut macro_avg = BTreeMap::new();
    for metric in first.keys() {
        let column: Option<BTreeMap<String, f64>> = per_dataset
            .iter()
            .map(|(d, m)| m.get(metric).map(|v| (d.clone(), *v)))
            .collect();
        if let Some(column) = column {
            macro_avg.insert(metric.clone(), macro_average(&column)?);
        }
    }
    Ok(MetricReport {
        per_dataset,
        macro_avg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub datasets: BTreeMap<String, DatasetJson>,
    #[serde(rename = "macro")]
    pub macro_avg: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetJson {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub skipped_queries: usize,
}

impl ReportJson {
    pub fn new(report: &MetricReport, datasets: &BTreeMap<String, DatasetEvaluation>) -> Self {
        Self {
            datasets: report
                .per_dataset
                .iter()
                .map(|(name, metrics)| {
                    let skipped = datasets.get(name).map_or(0, |e| e.skipped_queries);
                    (
                        name.clone(),
                        DatasetJson {
                            metrics: metrics.clone(),
                            skipped_queries: skipped,
                        },
                    )
                })
                .collect(),
            macro_avg: report.macro_avg.clone(),
        }
    }
}

/// Renders `value * 100` rounded half-up to one decimal.
pub fn percent_1dp(value: f64) -> String {
    // The epsilon absorbs binary representation error at exact halves (0.6345 * 1000).
    let tenths = (value * 1000.0 + 0.5 + 1e-9).floor();
    format!("{:.1}", tenths / 10.0)
}

/// One table row: a (VLM, text encoder) pair and its per-dataset values.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub vlm: String,
    pub encoder: String,
    pub values: BTreeMap<String, f64>,
}

/// Aligned text table: `VLM  Text Encoder  <datasets...>  AVG`, rows sorted by
/// (VLM, encoder), values as percentages with one decimal, `-` for missing cells.
/// AVG is only shown for rows that cover every column.
pub fn render_table(rows: &[TableRow], datasets: &[String]) -> String {
    let mut rows: Vec<&TableRow> = rows.iter().collect();
    rows.sort_by(|a, b| (&a.vlm, &a.encoder).cmp(&(&b.vlm, &b.encoder)));

    let mut grid: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);
    let mut header = vec!["VLM".to_string(), "Text Encoder".to_string()];
    header.extend(datasets.iter().cloned());
    header.push("AVG".into());
    grid.push(header);
    for row in rows {
        let mut line = vec![row.vlm.clone(), row.encoder.clone()];
        let mut present = BTreeMap::new();
        for d in datasets {
            match row.values.get(d) {
                Some(v) => {
                    present.insert(d.clone(), *v);
                    line.push(percent_1dp(*v));
                }
                None => line.push("-".into()),
            }
        }
        let avg = if present.len() == datasets.len() {
            macro_average(&present).map(percent_1dp).unwrap_or_else(|_| "-".into())
        } else {
            "-".into()
        };
        line.push(avg);
        grid.push(line);
    }

    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if c < 2 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "{cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
