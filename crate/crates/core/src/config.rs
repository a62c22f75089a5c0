//! Pipeline configuration (TOML) and the ViDoRe-v2 dataset registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::describe::{PromptTemplate, VlmEndpointConfig};
use crate::encode::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::MissingQueryPolicy;
use crate::model::MetricSpec;

/// ViDoRe-v2 abbreviations and their Hugging Face dataset paths.
pub const VIDORE_V2: [(&str, &str); 9] = [
    ("RERB", "vidore/restaurant_esg_reports_beir"),
    ("SAXA", "vidore/synthetic_axa_filtered_v1.0"),
    ("SAXAM", "vidore/synthetic_axa_filtered_v1.0_multilingual"),
    ("SEME", "vidore/synthetic_economics_macro_economy_2024_filtered_v1.0"),
    ("SMBTI", "vidore/synthetic_mit_biomedical_tissue_interactions_unfiltered"),
    ("SMBTIM", "vidore/synthetic_mit_biomedical_tissue_interactions_unfiltered_multilingual"),
    ("SRS", "vidore/synthetic_rse_restaurant_filtered_v1.0"),
    ("SRSM", "vidore/synthetic_rse_restaurant_filtered_v1.0_multilingual"),
    ("SEMEM", "vidore/synthetics_economics_macro_economy_2024_filtered_v1.0_multilingual"),
];

pub fn hf_path(abbreviation: &str) -> Option<&'static str> {
    VIDORE_V2
        .iter()
        .find(|(a, _)| a.eq_ignore_ascii_case(abbreviation))
        .map(|(_, p)| *p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub corpus_path: PathBuf,
    pub queries_path: PathBuf,
    pub qrels_path: PathBuf,
    /// Precomputed document vectors for sparse encoders (`{"_id", "sparse"}` JSONL).
    #[serde(default)]
    pub sparse_docs_path: Option<PathBuf>,
    #[serde(default)]
    pub sparse_queries_path: Option<PathBuf>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_index_dir() -> PathBuf {
    PathBuf::from("index")
}

fn default_top_k() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetPaths>,
    pub vlm: VlmEndpointConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub prompt: PromptTemplate,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_index_dir")]
    pub index_dir: PathBuf,
    #[serde(default, rename = "cutoffs")]
    pub metrics: MetricSpec,
    #[serde(default = "default_top_k")]
    pub top_k_retrieve: usize,
    #[serde(default)]
    pub missing_query: MissingQueryPolicy,
}

impl PipelineConfig {
    /// Reads a TOML file, applies `key.path=value` overrides, resolves relative paths
    /// against the file's directory, applies API-key environment variables and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.resolve_paths(base);
        cfg.vlm.apply_env();
        cfg.encoder.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.cache_dir);
        fix(&mut self.index_dir);
        for d in self.datasets.values_mut() {
            fix(&mut d.corpus_path);
            fix(&mut d.queries_path);
            fix(&mut d.qrels_path);
            if let Some(p) = &mut d.sparse_docs_path {
                fix(p);
            }
            if let Some(p) = &mut d.sparse_queries_path {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vlm.validate()?;
        self.encoder.validate()?;
        if self.top_k_retrieve < self.metrics.max_cutoff() {
            return Err(Error::Config(format!(
                "top_k_retrieve ({}) must be >= the largest metric cutoff ({})",
                self.top_k_retrieve,
                self.metrics.max_cutoff()
            )));
        }
        if self.prompt.text.trim().is_empty() {
            return Err(Error::Config("prompt must not be empty".into()));
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetPaths> {
        self.datasets.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown dataset {name:?}; configured: {}",
                self.datasets.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal when possible
/// (`42`, `true`, `[1, 5]`, `"quoted"`), otherwise taken verbatim as a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
