//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use evirank::corpus::{make_synthetic, synthetic_embeddings, DEFAULT_SYNTHETIC_VOCAB};
use evirank::coverage::{EncoderSharing, ModelDims};
use evirank::{CoverageModel, EmbeddingTable, QuestionRecord, Result};

pub const EMBEDDING_DIM: usize = 16;

pub struct Fixture {
    pub records: Vec<QuestionRecord>,
    pub embeddings: Arc<EmbeddingTable>,
}

/// `n` synthetic questions with matching embeddings, fixed by `seed`.
pub fn fixture(seed: u64, n: usize) -> Result<Fixture> {
    Ok(Fixture {
        records: make_synthetic(seed, n, DEFAULT_SYNTHETIC_VOCAB)?,
        embeddings: Arc::new(synthetic_embeddings(seed, DEFAULT_SYNTHETIC_VOCAB, EMBEDDING_DIM)?),
    })
}

impl Fixture {
    pub fn model(&self, l: usize, sharing: EncoderSharing) -> Result<CoverageModel> {
        let dims = ModelDims {
            l,
            d: EMBEDDING_DIM,
            sharing,
            ..ModelDims::default()
        };
        CoverageModel::new(dims, self.embeddings.clone(), 7)
    }
}
