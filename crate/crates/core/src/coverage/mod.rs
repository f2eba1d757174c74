//! Coverage re-ranker: a match-LSTM that reads each candidate's union passage
//! against the question and scores all candidates jointly.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, peek_checkpoint, save_checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use model::{gold_labels, CoverageModel, CoverageParams, Dropout, EncoderSharing, ForwardTrace, ModelDims};
pub use train::{gradcheck_tiny_model, history_csv, train, EpochStats, TrainConfig, TrainOutcome};

use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::strength::CandidateGroup;
use crate::tensor::tape::{kl_value, normalize_labels};
use crate::textnorm::{self, TokenSeq, TokenSource};

/// All passages containing one candidate, concatenated in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionPassage {
    pub candidate: String,
    pub passage_ids: Vec<String>,
    pub tokens: TokenSeq,
    pub truncated: bool,
}

/// Concatenates, in passage-rank order, every passage containing the group's
/// surface form, keeping at most `max_len` tokens.
pub fn build_union_passage(record: &QuestionRecord, group: &CandidateGroup, max_len: usize) -> Result<UnionPassage> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let answer = textnorm::tokenize_as(&group.surface, TokenSource::Answer);
    let mut passage_ids = Vec::new();
    let mut tokens = Vec::new();
    if !answer.is_empty() {
        for p in record.passages_by_rank() {
            let seq = textnorm::tokenize_as(&p.text, TokenSource::Passage);
            if textnorm::contains_answer(&seq, &answer)? {
                passage_ids.push(p.id.clone());
                tokens.extend(seq.tokens);
            }
        }
    }
    let mut tokens = TokenSeq::new(tokens, TokenSource::Passage);
    let truncated = tokens.truncate(max_len);
    Ok(UnionPassage {
        candidate: group.canonical.clone(),
        passage_ids,
        tokens,
        truncated,
    })
}

/// `sum_k y_k (ln y_k - ln o_k)` with `y = labels / sum(labels)`.
pub fn kl_loss(o: &[f64], labels: &[f64]) -> Result<f64> {
    if o.len() != labels.len() {
        return Err(Error::Shape {
            op: "kl_loss",
            lhs: (o.len(), 1),
            rhs: (labels.len(), 1),
        });
    }
    let y = normalize_labels(labels)?;
    Ok(kl_value(o, &y))
}
