//! Answer re-ranking for open-domain question answering.
//!
//! A base reader proposes candidate answer spans drawn from many retrieved
//! passages. The re-rankers in this crate aggregate evidence for each
//! candidate across passages:
//!
//! - [`strength`]: count and probability-sum re-rankers over grouped spans.
//! - [`bm25`]: lexical scoring of each candidate's union passage.
//! - [`coverage`]: a match-LSTM network scoring how well a candidate's union
//!   passage covers the question, trained with a KL objective.
//! - [`combine`]: softmax re-normalization and weighted combination of the
//!   above, plus EM/F1 evaluation and top-K recall.
//!
//! [`tensor`] is the small reverse-mode differentiation kernel behind the
//! coverage network.

pub mod bm25;
pub mod combine;
pub mod corpus;
pub mod coverage;
mod error;
pub mod strength;
pub mod tensor;
pub mod textnorm;

pub use combine::{CombinationWeights, EvalReport, MethodScores};
pub use corpus::{CandidateSpan, DatasetStats, Passage, QuestionRecord};
pub use coverage::{CoverageModel, TrainConfig, UnionPassage};
pub use error::{Error, Result};
pub use strength::{CandidateGroup, Method, RankedEntry, RankedList};
pub use tensor::Tensor2;
pub use textnorm::{EmbeddingTable, TokenSeq};
