//! Batch retrieval of depression-symptom sentences from social-media corpora.
//!
//! The pipeline streams a TREC-formatted sentence corpus through two relevance
//! filters (a hashed n-gram logistic classifier, then a from-scratch LSTM),
//! embeds the survivors, assigns each one to its nearest of 21 symptom queries
//! by cosine similarity, and writes per-symptom top-k TREC run files. Runs are
//! scored against multi-assessor relevance judgments with AP, R-Precision, P@10
//! and NDCG@1000.
//!
//! Module map:
//!
//! * [`corpus`]: TREC corpus and labeled CSV parsing, train/validation split.
//! * [`filter`]: the common filter contract plus the [`filter::linear`] and
//!   [`filter::lstm`] stages.
//! * [`embed`]: pooling, normalization, the hash embedder and `BDEM` files.
//! * [`rank`]: symptom assignment and top-k run files.
//! * [`eval`]: qrels aggregation and ranking metrics.
//! * [`config`] and [`pipeline`]: end-to-end orchestration with checkpoints.

pub mod config;
pub mod corpus;
pub mod embed;
mod error;
pub mod eval;
pub mod filter;
pub mod pipeline;
pub mod rank;
pub mod text;

pub use error::{Error, Result};
