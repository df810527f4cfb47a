//! Dual-perspective fake-news detection.
//!
//! An article goes through keyword detection, then two independent
//! investigations: nearest labeled training examples (inside) and a web
//! search snippet (outside). Each feeds a model-backed judge, and a final
//! determination step resolves disagreements.
//!
//! Every model call goes through [`llm::Gateway`], which meters calls per
//! stage. Mock backends for the model, the search engine and the encoder
//! make the whole pipeline runnable offline.

pub mod cli;
pub mod config;
pub mod detection;
pub mod determination;
pub mod domain;
pub mod evaluation;
pub mod inside;
pub mod judge;
pub mod llm;
pub mod outside;
pub mod pipeline;
pub mod prompt;

pub use domain::{
    article_digest, DecidedBy, Evidence, Judgement, KeywordSet, Label, NewsArticle, Perspective, PipelineTrace,
    Stage, Verdict,
};
pub use evaluation::{compute_metrics, sample_split, MetricsReport, SplitSpec};
pub use judge::parse_verdict;
pub use llm::{CallLedger, Gateway, StageTag};
pub use pipeline::{PipelineConfig, PipelineContext};
