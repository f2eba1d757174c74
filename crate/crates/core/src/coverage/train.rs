use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{gold_labels, CoverageModel, Dropout, EncoderSharing, ModelDims, PreparedRecord};
use crate::corpus::{inject_gold_candidate, CandidateSpan, Passage, QuestionRecord};
use crate::error::{Error, Result};
use crate::strength::{top_groups, CandidateGroup};
use crate::tensor::{adam_step, grad_check, AdamState, GradCheckReport, Tensor2};
use crate::textnorm::{self, EmbeddingTable};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Candidate groups per question.
    pub k: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_union_len: usize,
    pub max_q_len: usize,
    pub max_a_len: usize,
    pub l: usize,
    pub d: usize,
    pub sharing: EncoderSharing,
    /// Probability given to gold answers injected into training candidates.
    pub gold_prob_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        TrainConfig {
            k: 5,
            lr: AdamState::DEFAULT_LR,
            dropout: 0.2,
            batch_size: 30,
            epochs: 20,
            seed: 13,
            max_union_len: dims.max_union_len,
            max_q_len: dims.max_q_len,
            max_a_len: dims.max_a_len,
            l: dims.l,
            d: dims.d,
            sharing: dims.sharing,
            gold_prob_floor: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            l: self.l,
            d: self.d,
            sharing: self.sharing,
            max_union_len: self.max_union_len,
            max_q_len: self.max_q_len,
            max_a_len: self.max_a_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.k < 2 {
            return Err(Error::invalid(format!("training needs k >= 2, got {}", self.k)));
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 0.5]", self.dropout)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and nonnegative",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.gold_prob_floor >= 0.0 && self.gold_prob_floor.is_finite()) {
            return Err(Error::invalid("gold_prob_floor must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_em: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev EM (then F1, then earliest).
    pub model: CoverageModel,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    /// Training records dropped for lacking any positive candidate.
    pub skipped: usize,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,dev_em,dev_f1\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.epoch, h.train_loss, h.dev_em, h.dev_f1);
    }
    out
}

struct Example {
    prepared: PreparedRecord,
    labels: Vec<f64>,
}

/// The first `k` groups, with the best-ranked positive swapped into the last
/// slot when none made the cut. `None` without any positive group.
fn training_groups(record: &QuestionRecord, k: usize) -> Option<(Vec<CandidateGroup>, Vec<f64>)> {
    let mut groups = top_groups(record, usize::MAX);
    let mut labels = gold_labels(record, &groups);
    let first_pos = labels.iter().position(|&y| y > 0.0)?;
    if first_pos >= k {
        groups.swap(k - 1, first_pos);
        labels.swap(k - 1, first_pos);
    }
    groups.truncate(k);
    labels.truncate(k);
    Some((groups, labels))
}

fn prepare_examples(
    model: &CoverageModel,
    records: &[QuestionRecord],
    config: &TrainConfig,
) -> Result<(Vec<Example>, usize)> {
    let prepared: Vec<Option<Example>> = records
        .par_iter()
        .map(|r| {
            let r = inject_gold_candidate(r, config.gold_prob_floor);
            match training_groups(&r, config.k) {
                Some((groups, labels)) => Ok(Some(Example {
                    prepared: model.prepare_groups(&r, groups)?,
                    labels,
                })),
                None => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let skipped = prepared.iter().filter(|e| e.is_none()).count();
    Ok((prepared.into_iter().flatten().collect(), skipped))
}

/// Mean EM and F1 of the top-ranked answer, over records with gold answers.
fn dev_scores(model: &CoverageModel, dev: &[QuestionRecord], k: usize) -> Result<(f64, f64)> {
    let scored: Vec<Option<(f64, f64)>> = dev
        .par_iter()
        .map(|r| {
            if r.gold_answers.is_empty() {
                return Ok(None);
            }
            let (_, list) = model.rank_candidates(r, k)?;
            Ok(Some(match list.top() {
                Some(top) => (
                    f64::from(u8::from(textnorm::exact_match(&top.answer, &r.gold_answers)?)),
                    textnorm::f1_score(&top.answer, &r.gold_answers)?,
                ),
                None => (0.0, 0.0),
            }))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = scored.into_iter().flatten().collect();
    if kept.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = kept.len() as f64;
    Ok((
        kept.iter().map(|s| s.0).sum::<f64>() / n,
        kept.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

/// Mini-batch Adam on the KL objective. Gold answers missing from a training
/// record's candidates are injected first. Deterministic for a fixed seed,
/// whatever the thread count: per-example gradients are summed in order.
pub fn train(
    model: &CoverageModel,
    train: &[QuestionRecord],
    dev: &[QuestionRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.dims != config.dims() {
        return Err(Error::invalid(format!(
            "model dims {:?} do not match training config {:?}",
            model.dims,
            config.dims()
        )));
    }
    let (examples, skipped) = prepare_examples(model, train, config)?;
    if examples.is_empty() {
        return Err(Error::Empty("no training record has a positive candidate".into()));
    }

    let mut current = model.clone();
    let mut flat = current.params.to_flat();
    let mut adam = AdamState::new(&flat, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(CoverageModel, usize, f64, f64)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let results: Vec<(f64, Vec<Tensor2>)> = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| {
                    let ex = &examples[i];
                    let mut dropout = Dropout::new(config.dropout, seed)?;
                    current.loss_and_grads(&ex.prepared, &ex.labels, Some(&mut dropout))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Tensor2> = flat.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += loss;
                for (t, g) in total.iter_mut().zip(grads) {
                    t.add_assign(g);
                }
            }
            for t in &mut total {
                t.scale_assign(scale);
            }
            adam_step(&mut flat, &total, &mut adam)?;
            if !flat.iter().all(Tensor2::is_finite) {
                return Err(Error::NonFinite("parameters after update"));
            }
            current.params.assign_flat(&flat)?;
        }
        let (dev_em, dev_f1) = dev_scores(&current, dev, config.k)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / examples.len() as f64,
            dev_em,
            dev_f1,
        });
        let improved = match &best {
            None => true,
            Some((_, _, em, f1)) => dev_em > *em || (dev_em == *em && dev_f1 > *f1),
        };
        if improved && !dev.is_empty() {
            best = Some((current.clone(), epoch, dev_em, dev_f1));
        }
    }

    let (model, best_epoch) = match best {
        Some((m, e, _, _)) => (m, e),
        None => (current, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        skipped,
    })
}

const GRADCHECK_WARMUP_STEPS: usize = 30;
const GRADCHECK_WARMUP_LR: f64 = 0.05;

/// Finite-difference check of the whole network at `l = 4`, `d = 3`, two
/// candidates and sequences of at most four tokens.
///
/// Parameters start uniform in (-0.5, 0.5) and take a few Adam steps on the
/// example before the check, moving it off the `ln 2` plateau where one ulp of
/// the loss swamps the smallest gradients at `h = 1e-5`.
pub fn gradcheck_tiny_model(seed: u64, sharing: EncoderSharing, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = ["w0", "w1", "w2", "w3", "e0", "e1"];
    let vectors: HashMap<String, Vec<f64>> = vocab
        .iter()
        .map(|w| (w.to_string(), (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let embeddings = Arc::new(EmbeddingTable::from_vectors(3, vectors)?);
    let dims = ModelDims {
        l: 4,
        d: 3,
        sharing,
        max_union_len: 4,
        max_q_len: 4,
        max_a_len: 4,
    };
    let mut model = CoverageModel::new(dims, embeddings, rng.gen())?;
    for t in model.params.tensors_mut() {
        *t = Tensor2::uniform(t.rows(), t.cols(), 0.5, &mut rng);
    }
    let passage = |id: &str, text: &str, rank| Passage {
        id: id.into(),
        text: text.into(),
        rank,
    };
    let span = |text: &str, pid: &str, prob, reader_rank| CandidateSpan {
        text: text.into(),
        passage_id: pid.into(),
        prob: Some(prob),
        reader_rank,
    };
    let record = QuestionRecord {
        id: "tiny".into(),
        question: "w0 w1 w2".into(),
        gold_answers: vec!["e0".into()],
        passages: vec![
            passage("p1", "w0 e0 w1", 1),
            passage("p2", "w2 e0 e1", 2),
            passage("p3", "e1 w3", 3),
        ],
        candidates: vec![span("e0", "p1", 0.4, 0), span("e1", "p2", 0.6, 1)],
    };
    let groups = top_groups(&record, 2);
    let labels = gold_labels(&record, &groups);
    let prepared = model.prepare_groups(&record, groups)?;
    let mut flat = model.params.to_flat();
    let mut adam = AdamState::new(&flat, GRADCHECK_WARMUP_LR);
    for _ in 0..GRADCHECK_WARMUP_STEPS {
        let (_, g) = model.loss_and_grads(&prepared, &labels, None)?;
        adam_step(&mut flat, &g, &mut adam)?;
        model.params.assign_flat(&flat)?;
    }
    let mut probe = model.clone();
    grad_check(&flat, h, |ps| {
        probe.params.assign_flat(ps)?;
        probe.loss_and_grads(&prepared, &labels, None)
    })
}
