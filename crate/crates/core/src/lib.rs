//! Zero-shot visual document retrieval by describing page images with a
//! vision-language model and retrieving over the descriptions with a text encoder.
//!
//! The stages are independent and cache-backed:
//!
//! 1. [`describe`]: page image -> description via an OpenAI-compatible chat endpoint
//! 2. [`encode`]: descriptions and queries -> dense or sparse vectors
//! 3. [`index`]: exact dense or inverted sparse index, persisted to disk
//! 4. [`eval`]: nDCG@k / Recall@k, per dataset and macro-averaged
//!
//! [`pipeline::Pipeline`] wires them together from a [`config::PipelineConfig`].

pub mod config;
pub mod describe;
pub mod encode;
pub mod error;
pub mod eval;
pub mod formats;
mod http;
pub mod index;
pub mod model;
pub mod pipeline;

pub use config::{DatasetPaths, PipelineConfig};
pub use describe::{Describer, DescriptionCache, PromptTemplate, Tokenizer, VlmEndpointConfig};
pub use encode::{EmbeddingCache, Encoder, EncoderConfig, EncoderKind, Role};
pub use error::{Error, ErrorClass, Result};
pub use eval::{macro_average, ndcg_at_k, recall_at_k, MissingQueryPolicy};
pub use http::RetryPolicy;
pub use index::{DenseIndex, Similarity, SparseIndex};
pub use model::{
    DenseVector, DocRef, DocSource, Description, MetricReport, MetricSpec, Qrels, Query, RunList, ScoredDoc,
    SparseVector,
};
pub use pipeline::Pipeline;
