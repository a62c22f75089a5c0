//! On-disk collection and run formats.
//!
//! * corpus JSONL: `{"_id": ..., "image_path": ...}` or `{"_id": ..., "text": ...}`
//! * queries JSONL: `{"_id": ..., "text": ...}`
//! * qrels: BEIR `query-id<TAB>corpus-id<TAB>score` (optional header) or TREC
//!   `qid 0 docid rel`, detected per line by column count
//! * runs: TREC `qid Q0 docid rank score tag`

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DocRef, DocSource, Qrels, Query, RunList, ScoredDoc};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn lines<'a>(
    reader: impl BufRead + 'a,
    path: &'a Path,
) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    reader
        .lines()
        .enumerate()
        .map(move |(i, l)| l.map(|l| (i + 1, l)).map_err(|e| Error::io(path, e)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// Parses corpus JSONL. Image paths are returned exactly as written.
pub fn parse_corpus(reader: impl BufRead, path: &Path) -> Result<Vec<DocRef>> {
    let mut docs = Vec::new();
    for line in lines(reader, path) {
        let (n, line) = line?;
        let row: CorpusLine =
            serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        if row.id.is_empty() {
            return Err(parse_err(path, n, "empty _id"));
        }
        let source = match (row.image_path, row.text) {
            (Some(p), _) => DocSource::Image(p),
            (None, Some(t)) => DocSource::Text(t),
            (None, None) => {
                return Err(parse_err(path, n, "document needs `image_path` or `text`"));
            }
        };
        docs.push(DocRef {
            doc_id: row.id,
            source,
        });
    }
    Ok(docs)
}

/// Reads a corpus file, resolving relative image paths against the file's directory.
pub fn read_corpus(path: &Path) -> Result<Vec<DocRef>> {
    let mut docs = parse_corpus(open(path)?, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut docs {
        d.resolve_against(base);
    }
    Ok(docs)
}

pub fn write_corpus(mut w: impl Write, docs: &[DocRef]) -> std::io::Result<()> {
    for d in docs {
        let row = match &d.source {
            DocSource::Image(p) => CorpusLine {
                id: d.doc_id.clone(),
                image_path: Some(p.clone()),
                text: None,
            },
            DocSource::Text(t) => CorpusLine {
                id: d.doc_id.clone(),
                image_path: None,
                text: Some(t.clone()),
            },
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_queries(reader: impl BufRead, path: &Path) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    for line in lines(reader, path) {
        let (n, line) = line?;
        let q: Query = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        if q.query_id.is_empty() {
            return Err(parse_err(path, n, "empty _id"));
        }
        if q.text.trim().is_empty() {
            return Err(parse_err(path, n, format!("query {} has empty text", q.query_id)));
        }
        queries.push(q);
    }
    Ok(queries)
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    parse_queries(open(path)?, path)
}

pub fn write_queries(mut w: impl Write, queries: &[Query]) -> std::io::Result<()> {
    for q in queries {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_qrels(reader: impl BufRead, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    let mut first = true;
    for line in lines(reader, path) {
        let (n, line) = line?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        let (q, d, rel) = match cols.as_slice() {
            [q, d, rel] => (*q, *d, *rel),
            [q, _, d, rel] => (*q, *d, *rel),
            _ => {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected 3 or 4 columns, found {}", cols.len()),
                ))
            }
        };
        let is_first = std::mem::take(&mut first);
        let rel: i64 = match rel.parse() {
            Ok(r) => r,
            // A non-numeric first line is a header such as `query-id corpus-id score`.
            Err(_) if is_first => continue,
            Err(_) => return Err(parse_err(path, n, format!("relevance {rel:?} is not an integer"))),
        };
        let rel = u32::try_from(rel)
            .map_err(|_| parse_err(path, n, format!("relevance {rel} out of range (must be >= 0)")))?;
        qrels.insert(q, d, rel);
    }
    Ok(qrels)
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(open(path)?, path)
}

/// Writes BEIR three-column qrels with a header line.
pub fn write_qrels(mut w: impl Write, qrels: &Qrels) -> std::io::Result<()> {
    writeln!(w, "query-id\tcorpus-id\tscore")?;
    for (q, d, r) in qrels.iter() {
        writeln!(w, "{q}\t{d}\t{r}")?;
    }
    Ok(())
}

/// Formats a score so that it parses back to the identical `f64` and shows at
/// least six significant digits.
pub fn format_score(score: f64) -> String {
    const MIN_SIG: usize = 6;
    let score = if score == 0.0 { 0.0 } else { score };
    let mut s = score.to_string();
    let digits = s.trim_start_matches('-').replace('.', "");
    let sig = digits.trim_start_matches('0').len();
    let shown = if sig == 0 {
        // zero: count the single leading digit
        digits.len().max(1)
    } else {
        sig
    };
    if shown < MIN_SIG {
        if !s.contains('.') {
            s.push('.');
        }
        s.extend(std::iter::repeat_n('0', MIN_SIG - shown));
    }
    s
}

/// Writes runs in TREC six-column format, ranks starting at 1.
pub fn write_run(mut w: impl Write, runs: &[RunList], tag: &str) -> std::io::Result<()> {
    for run in runs {
        for (i, d) in run.ranking().iter().enumerate() {
            writeln!(
                w,
                "{} Q0 {} {} {} {}",
                run.query_id(),
                d.doc_id,
                i + 1,
                format_score(d.score),
                tag
            )?;
        }
    }
    Ok(())
}

/// A parsed run file: rankings in order of first appearance plus the run tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub runs: Vec<RunList>,
    pub tag: Option<String>,
}

/// Parses a TREC run. Rankings are re-sorted by score then doc id; the rank column
/// is only checked to be a positive integer.
pub fn parse_run(reader: impl BufRead, path: &Path) -> Result<RunFile> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<ScoredDoc>> = HashMap::new();
    let mut tag = None;
    for line in lines(reader, path) {
        let (n, line) = line?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [q, _, d, rank, score, t] = cols.as_slice() else {
            return Err(parse_err(path, n, format!("expected 6 columns, found {}", cols.len())));
        };
        rank.parse::<u64>()
            .ok()
            .filter(|r| *r > 0)
            .ok_or_else(|| parse_err(path, n, format!("invalid rank {rank:?}")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| parse_err(path, n, format!("invalid score {score:?}")))?;
        if tag.is_none() {
            tag = Some(t.to_string());
        }
        if !grouped.contains_key(*q) {
            order.push(q.to_string());
        }
        grouped.entry(q.to_string()).or_default().push(ScoredDoc::new(*d, score));
    }
    let runs = order
        .into_iter()
        .map(|q| {
            let ranking = grouped.remove(&q).unwrap_or_default();
            RunList::new(q, ranking)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunFile { runs, tag })
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    parse_run(open(path)?, path)
}
