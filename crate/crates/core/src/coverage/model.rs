use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_union_passage, UnionPassage};
use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::strength::{self, CandidateGroup, Method, RankedList};
use crate::tensor::{BiLstmParams, BiLstmVars, Tape, Tensor2, Var};
use crate::textnorm::{self, EmbeddingTable, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSharing {
    /// One BiLSTM encodes answer, question and passage.
    #[default]
    Shared,
    /// Separate BiLSTMs for answer, question and passage.
    Separate,
}

impl std::str::FromStr for EncoderSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(EncoderSharing::Shared),
            "separate" => Ok(EncoderSharing::Separate),
            other => Err(Error::invalid(format!("unknown encoder sharing `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Hidden size of every BiLSTM output; must be even.
    pub l: usize,
    /// Word embedding size.
    pub d: usize,
    pub sharing: EncoderSharing,
    pub max_union_len: usize,
    pub max_q_len: usize,
    pub max_a_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            l: 32,
            d: 16,
            sharing: EncoderSharing::Shared,
            max_union_len: 400,
            max_q_len: 60,
            max_a_len: 10,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || !self.l.is_multiple_of(2) {
            return Err(Error::invalid(format!("l must be even and positive, got {}", self.l)));
        }
        if self.d == 0 {
            return Err(Error::invalid("d must be positive"));
        }
        if self.max_union_len == 0 || self.max_q_len == 0 || self.max_a_len == 0 {
            return Err(Error::invalid("sequence length limits must be positive"));
        }
        Ok(())
    }

    fn encoder_count(&self) -> usize {
        match self.sharing {
            EncoderSharing::Shared => 1,
            EncoderSharing::Separate => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoder {
    Answer = 0,
    Question = 1,
    Passage = 2,
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageParams {
    /// One shared encoder, or `[answer, question, passage]`.
    pub encoders: Vec<BiLstmParams>,
    /// `2l x 4l`
    pub w_m: Tensor2,
    /// `2l x 1`
    pub b_m: Tensor2,
    /// `2l -> l`
    pub agg: BiLstmParams,
    /// `l x l`
    pub w_r: Tensor2,
    /// `l x 1`
    pub b_r: Tensor2,
    /// `1 x l`
    pub w_o: Tensor2,
    /// `1 x 1`
    pub b_o: Tensor2,
}

const BILSTM_PARTS: [&str; 6] = ["fwd.w_x", "fwd.w_h", "fwd.b", "bwd.w_x", "bwd.w_h", "bwd.b"];

impl CoverageParams {
    pub fn zeros(dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let l = dims.l;
        Ok(CoverageParams {
            encoders: (0..dims.encoder_count())
                .map(|_| BiLstmParams::zeros(dims.d, l))
                .collect::<Result<_>>()?,
            w_m: Tensor2::zeros(2 * l, 4 * l),
            b_m: Tensor2::zeros(2 * l, 1),
            agg: BiLstmParams::zeros(2 * l, l)?,
            w_r: Tensor2::zeros(l, l),
            b_r: Tensor2::zeros(l, 1),
            w_o: Tensor2::zeros(1, l),
            b_o: Tensor2::zeros(1, 1),
        })
    }

    /// LSTMs uniform(-0.08, 0.08) with forget bias 1; dense weights Xavier;
    /// dense biases zero.
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let l = dims.l;
        let encoders = (0..dims.encoder_count())
            .map(|_| BiLstmParams::init(dims.d, l, rng))
            .collect::<Result<_>>()?;
        let w_m = Tensor2::xavier(2 * l, 4 * l, rng);
        let agg = BiLstmParams::init(2 * l, l, rng)?;
        let w_r = Tensor2::xavier(l, l, rng);
        let w_o = Tensor2::xavier(1, l, rng);
        Ok(CoverageParams {
            encoders,
            w_m,
            b_m: Tensor2::zeros(2 * l, 1),
            agg,
            w_r,
            b_r: Tensor2::zeros(l, 1),
            w_o,
            b_o: Tensor2::zeros(1, 1),
        })
    }

    pub fn names(dims: &ModelDims) -> Vec<String> {
        let enc_prefixes: Vec<&str> = match dims.sharing {
            EncoderSharing::Shared => vec!["encoder"],
            EncoderSharing::Separate => vec!["encoder_answer", "encoder_question", "encoder_passage"],
        };
        let mut names = Vec::new();
        for p in enc_prefixes {
            names.extend(BILSTM_PARTS.iter().map(|s| format!("{p}.{s}")));
        }
        names.push("w_m".into());
        names.push("b_m".into());
        names.extend(BILSTM_PARTS.iter().map(|s| format!("agg.{s}")));
        for n in ["w_r", "b_r", "w_o", "b_o"] {
            names.push(n.into());
        }
        names
    }

    /// Every tensor in a fixed order matching [`CoverageParams::names`].
    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self.encoders.iter().flat_map(|e| e.tensors()).collect();
        out.push(&self.w_m);
        out.push(&self.b_m);
        out.extend(self.agg.tensors());
        out.extend([&self.w_r, &self.b_r, &self.w_o, &self.b_o]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let CoverageParams {
            encoders,
            w_m,
            b_m,
            agg,
            w_r,
            b_r,
            w_o,
            b_o,
        } = self;
        let mut out: Vec<&mut Tensor2> = encoders.iter_mut().flat_map(|e| e.tensors_mut()).collect();
        out.push(w_m);
        out.push(b_m);
        out.extend(agg.tensors_mut());
        out.extend([w_r, b_r, w_o, b_o]);
        out
    }

    pub fn to_flat(&self) -> Vec<Tensor2> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn assign_flat(&mut self, flat: &[Tensor2]) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != flat.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                slots.len(),
                flat.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(flat) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "assign parameters",
                    lhs: slot.shape(),
                    rhs: t.shape(),
                });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape) -> ParamVars {
        let encoders = self.encoders.iter().map(|e| e.register(tape)).collect();
        ParamVars {
            encoders,
            w_m: tape.leaf(self.w_m.clone()),
            b_m: tape.leaf(self.b_m.clone()),
            agg: self.agg.register(tape),
            w_r: tape.leaf(self.w_r.clone()),
            b_r: tape.leaf(self.b_r.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            b_o: tape.leaf(self.b_o.clone()),
        }
    }
}

struct ParamVars {
    encoders: Vec<BiLstmVars>,
    w_m: Var,
    b_m: Var,
    agg: BiLstmVars,
    w_r: Var,
    b_r: Var,
    w_o: Var,
    b_o: Var,
}

impl ParamVars {
    fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoders.iter().flat_map(|e| e.vars()).collect();
        out.push(self.w_m);
        out.push(self.b_m);
        out.extend(self.agg.vars());
        out.extend([self.w_r, self.b_r, self.w_o, self.b_o]);
        out
    }

    fn encoder(&self, which: Encoder) -> &BiLstmVars {
        &self.encoders[(which as usize).min(self.encoders.len() - 1)]
    }
}

/// Inverted dropout with its own random stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.p;
        let mask = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, Tensor2::new(r, c, mask)?)
    }
}

fn maybe_dropout(dropout: &mut Option<&mut Dropout>, tape: &mut Tape, x: Var) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Intermediate values of one match pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h_a: Tensor2,
    pub h_q: Tensor2,
    pub h_p: Tensor2,
    pub h_aq: Tensor2,
    pub alpha: Tensor2,
    pub h_aq_bar: Tensor2,
    pub m: Tensor2,
    pub h_m: Tensor2,
    pub h_s: Vec<f64>,
}

struct MatchVars {
    h_a: Var,
    h_aq: Var,
    h_p: Var,
    alpha: Var,
    h_aq_bar: Var,
    m: Var,
    h_m: Var,
    h_s: Var,
}

/// Candidate inputs already embedded as `d x T` matrices.
#[derive(Debug, Clone)]
pub(crate) struct PreparedCandidate {
    pub group: CandidateGroup,
    pub answer: Tensor2,
    pub union: Tensor2,
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedRecord {
    pub question: Tensor2,
    pub candidates: Vec<PreparedCandidate>,
}

/// The coverage re-ranker: fixed embeddings plus [`CoverageParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageModel {
    pub dims: ModelDims,
    pub params: CoverageParams,
    pub embeddings: Arc<EmbeddingTable>,
}

impl CoverageModel {
    pub fn new(dims: ModelDims, embeddings: Arc<EmbeddingTable>, seed: u64) -> Result<Self> {
        Self::check_embeddings(&dims, &embeddings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(CoverageModel {
            params: CoverageParams::init(&dims, &mut rng)?,
            dims,
            embeddings,
        })
    }

    pub fn zeros(dims: ModelDims, embeddings: Arc<EmbeddingTable>) -> Result<Self> {
        Self::check_embeddings(&dims, &embeddings)?;
        Ok(CoverageModel {
            params: CoverageParams::zeros(&dims)?,
            dims,
            embeddings,
        })
    }

    fn check_embeddings(dims: &ModelDims, embeddings: &EmbeddingTable) -> Result<()> {
        if embeddings.dim() != dims.d {
            return Err(Error::invalid(format!(
                "embedding dimension {} does not match model d = {}",
                embeddings.dim(),
                dims.d
            )));
        }
        Ok(())
    }

    /// `d x T` embedding matrix; an empty sequence becomes a single zero
    /// padding column.
    pub fn embed(&self, tokens: &[String]) -> Tensor2 {
        let d = self.dims.d;
        let steps = tokens.len().max(1);
        let mut m = Tensor2::zeros(d, steps);
        for (t, tok) in tokens.iter().enumerate() {
            for (i, &x) in self.embeddings.lookup(tok).iter().enumerate() {
                m.set(i, t, x);
            }
        }
        m
    }

    fn embed_limited(&self, tokens: &[String], max_len: usize) -> Tensor2 {
        self.embed(&tokens[..tokens.len().min(max_len)])
    }

    pub(crate) fn prepare_groups(
        &self,
        record: &QuestionRecord,
        groups: Vec<CandidateGroup>,
    ) -> Result<PreparedRecord> {
        let q = textnorm::tokenize(&record.question);
        let candidates = groups
            .into_iter()
            .map(|group| {
                let union = build_union_passage(record, &group, self.dims.max_union_len)?;
                let answer = textnorm::tokenize(&group.surface);
                Ok(PreparedCandidate {
                    answer: self.embed_limited(&answer, self.dims.max_a_len),
                    union: self.embed(&union.tokens.tokens),
                    group,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PreparedRecord {
            question: self.embed_limited(&q, self.dims.max_q_len),
            candidates,
        })
    }

    fn encode(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        which: Encoder,
        x: &Tensor2,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let x = tape.leaf(x.clone());
        let x = maybe_dropout(dropout, tape, x)?;
        vars.encoder(which).forward(tape, x)
    }

    /// Attention, comparison and aggregation for one candidate.
    fn match_encoded(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        h_q: Var,
        answer: &Tensor2,
        union: &Tensor2,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<MatchVars> {
        let h_a = self.encode(tape, vars, Encoder::Answer, answer, dropout)?;
        let h_p = self.encode(tape, vars, Encoder::Passage, union, dropout)?;
        let h_aq = tape.concat_cols(&[h_a, h_q])?;
        let h_p_t = tape.transpose(h_p);
        let scores = tape.matmul(h_p_t, h_aq)?;
        let alpha = tape.softmax_columns(scores);
        let h_aq_bar = tape.matmul(h_p, alpha)?;
        let prod = tape.mul(h_aq, h_aq_bar)?;
        let diff = tape.sub(h_aq, h_aq_bar)?;
        let stacked = tape.concat_rows(&[prod, diff, h_aq, h_aq_bar])?;
        let pre = tape.matmul(vars.w_m, stacked)?;
        let pre = tape.add_bias(pre, vars.b_m)?;
        let m = tape.relu(pre);
        let m_in = maybe_dropout(dropout, tape, m)?;
        let h_m = vars.agg.forward(tape, m_in)?;
        let h_s = tape.maxpool_rows(h_m)?;
        Ok(MatchVars {
            h_a,
            h_aq,
            h_p,
            alpha,
            h_aq_bar,
            m,
            h_m,
            h_s,
        })
    }

    /// Scores stacked match vectors; returns the `K x 1` logits.
    fn head(&self, tape: &mut Tape, vars: &ParamVars, h_s: &[Var]) -> Result<Var> {
        let stacked = tape.concat_cols(h_s)?;
        let r = tape.matmul(vars.w_r, stacked)?;
        let r = tape.add_bias(r, vars.b_r)?;
        let r = tape.tanh(r);
        // b_o shifts every logit equally and cancels in the softmax, so it is
        // kept as a parameter but left out of the graph.
        let logits = tape.matmul(vars.w_o, r)?;
        Ok(tape.transpose(logits))
    }

    /// Runs every candidate of a prepared record through the network. Returns
    /// the tape, parameter handles and logit node.
    fn run_prepared(
        &self,
        prepared: &PreparedRecord,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Tape, ParamVars, Var)> {
        if prepared.candidates.is_empty() {
            return Err(Error::Empty("no candidates to rank".into()));
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let h_q = self.encode(&mut tape, &vars, Encoder::Question, &prepared.question, &mut dropout)?;
        let mut h_s = Vec::with_capacity(prepared.candidates.len());
        for c in &prepared.candidates {
            let mv = self.match_encoded(&mut tape, &vars, h_q, &c.answer, &c.union, &mut dropout)?;
            h_s.push(mv.h_s);
        }
        let logits = self.head(&mut tape, &vars, &h_s)?;
        Ok((tape, vars, logits))
    }

    pub(crate) fn output_distribution(&self, prepared: &PreparedRecord) -> Result<Vec<f64>> {
        let (mut tape, _, logits) = self.run_prepared(prepared, None)?;
        let o = tape.softmax_columns(logits);
        Ok(tape.value(o).data().to_vec())
    }

    /// KL loss and its gradient for every parameter, in [`CoverageParams::tensors`] order.
    pub(crate) fn loss_and_grads(
        &self,
        prepared: &PreparedRecord,
        labels: &[f64],
        dropout: Option<&mut Dropout>,
    ) -> Result<(f64, Vec<Tensor2>)> {
        let (mut tape, vars, logits) = self.run_prepared(prepared, dropout)?;
        let loss = tape.softmax_kl(logits, labels)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).get(0, 0);
        Ok((value, vars.all().into_iter().map(|v| grads.wrt(&tape, v)).collect()))
    }

    /// Matches one candidate against the question through its union passage
    /// and returns the pooled match vector with every intermediate.
    /// Inputs longer than the model's limits are truncated.
    pub fn forward_match(
        &self,
        question: &TokenSeq,
        answer: &TokenSeq,
        union: &UnionPassage,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Vec<f64>, ForwardTrace)> {
        if question.is_empty() {
            return Err(Error::Empty("question has no tokens".into()));
        }
        if answer.is_empty() {
            return Err(Error::Empty("answer has no tokens".into()));
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let q = self.embed_limited(&question.tokens, self.dims.max_q_len);
        let a = self.embed_limited(&answer.tokens, self.dims.max_a_len);
        let p = self.embed_limited(&union.tokens.tokens, self.dims.max_union_len);
        let h_q = self.encode(&mut tape, &vars, Encoder::Question, &q, &mut dropout)?;
        let mv = self.match_encoded(&mut tape, &vars, h_q, &a, &p, &mut dropout)?;
        let v = |x: Var| tape.value(x).clone();
        let trace = ForwardTrace {
            h_a: v(mv.h_a),
            h_q: v(h_q),
            h_p: v(mv.h_p),
            h_aq: v(mv.h_aq),
            alpha: v(mv.alpha),
            h_aq_bar: v(mv.h_aq_bar),
            m: v(mv.m),
            h_m: v(mv.h_m),
            h_s: tape.value(mv.h_s).data().to_vec(),
        };
        Ok((trace.h_s.clone(), trace))
    }

    /// Ranks the first `k` candidate groups. `o` follows group order (best
    /// reader rank first); the list is ordered by `o`.
    pub fn rank_candidates(&self, record: &QuestionRecord, k: usize) -> Result<(Vec<f64>, RankedList)> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let groups = strength::top_groups(record, k);
        if groups.is_empty() {
            return Ok((Vec::new(), RankedList::empty(Method::Coverage)));
        }
        self.rank_groups(record, groups)
    }

    pub fn rank_groups(&self, record: &QuestionRecord, groups: Vec<CandidateGroup>) -> Result<(Vec<f64>, RankedList)> {
        let prepared = self.prepare_groups(record, groups)?;
        let o = self.output_distribution(&prepared)?;
        let scored = prepared
            .candidates
            .into_iter()
            .map(|c| c.group)
            .zip(o.iter().copied())
            .collect();
        Ok((o, strength::order_groups(Method::Coverage, scored)))
    }
}

/// 1 for groups whose canonical text is a normalized gold alias.
pub fn gold_labels(record: &QuestionRecord, groups: &[CandidateGroup]) -> Vec<f64> {
    let golds: HashSet<String> = record
        .gold_answers
        .iter()
        .map(|g| textnorm::normalize_answer(g))
        .collect();
    groups
        .iter()
        .map(|g| if golds.contains(&g.canonical) { 1.0 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic, synthetic_embeddings, CandidateSpan, Passage};
    use crate::textnorm::TokenSource;

    fn dims() -> ModelDims {
        ModelDims {
            l: 6,
            d: 5,
            ..ModelDims::default()
        }
    }

    fn model(seed: u64) -> CoverageModel {
        let emb = Arc::new(synthetic_embeddings(seed, 40, 5).unwrap());
        CoverageModel::new(dims(), emb, seed).unwrap()
    }

    fn seq(text: &str, source: TokenSource) -> TokenSeq {
        textnorm::tokenize_as(text, source)
    }

    fn union_of(text: &str) -> UnionPassage {
        UnionPassage {
            candidate: String::new(),
            passage_ids: vec![],
            tokens: seq(text, TokenSource::Passage),
            truncated: false,
        }
    }

    #[test]
    fn zero_parameters_give_zero_match_vector() {
        let emb = Arc::new(synthetic_embeddings(1, 40, 5).unwrap());
        let m = CoverageModel::zeros(dims(), emb).unwrap();
        let q = seq("w0 w1 w2", TokenSource::Question);
        let a = seq("e0", TokenSource::Answer);
        let (hs, trace) = m.forward_match(&q, &a, &union_of("w0 e0 w1 w2"), None).unwrap();
        assert_eq!(hs, vec![0.0; 6]);
        assert_eq!(trace.m.rows(), 12);
    }

    #[test]
    fn trace_shapes_and_attention_columns() {
        let m = model(2);
        let q = seq("w0 w1 w2", TokenSource::Question);
        let a = seq("e0 e1", TokenSource::Answer);
        let (hs, t) = m.forward_match(&q, &a, &union_of("w3 e0 e1 w1 w0"), None).unwrap();
        assert_eq!(hs.len(), 6);
        assert_eq!(t.h_aq.shape(), (6, 5));
        assert_eq!(t.alpha.shape(), (5, 5));
        assert_eq!(t.h_aq_bar.shape(), (6, 5));
        assert_eq!(t.m.shape(), (12, 5));
        assert_eq!(t.h_m.shape(), (6, 5));
        for c in 0..t.alpha.cols() {
            let s: f64 = t.alpha.col(c).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(t.m.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn empty_inputs() {
        let m = model(3);
        let q = seq("w0 w1", TokenSource::Question);
        let a = seq("e0", TokenSource::Answer);
        let empty = seq("", TokenSource::Answer);
        assert!(m.forward_match(&empty, &a, &union_of("w0"), None).is_err());
        assert!(m.forward_match(&q, &empty, &union_of("w0"), None).is_err());
        let (hs, t) = m.forward_match(&q, &a, &union_of(""), None).unwrap();
        assert_eq!(t.h_p.cols(), 1);
        assert!(hs.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn depends_only_on_token_sequence() {
        let m = model(4);
        let q = seq("w0 w1 w2", TokenSource::Question);
        let a = seq("e0", TokenSource::Answer);
        let r = |p1: &str, p2: &str| QuestionRecord {
            id: "x".into(),
            question: "w0 w1 w2".into(),
            gold_answers: vec!["e0".into()],
            passages: vec![
                Passage {
                    id: "p1".into(),
                    text: p1.into(),
                    rank: 1,
                },
                Passage {
                    id: "p2".into(),
                    text: p2.into(),
                    rank: 2,
                },
            ],
            candidates: vec![CandidateSpan {
                text: "e0".into(),
                passage_id: "p1".into(),
                prob: Some(1.0),
                reader_rank: 0,
            }],
        };
        let union = |rec: &QuestionRecord| build_union_passage(rec, &strength::top_groups(rec, 1)[0], 100).unwrap();
        let ua = union(&r("w0 e0 w1", "w2 e0"));
        let ub = union(&r("w0 e0", "w1 w2 e0"));
        assert_eq!(ua.passage_ids, ub.passage_ids);
        assert_eq!(ua.tokens, ub.tokens);
        let (ha, _) = m.forward_match(&q, &a, &ua, None).unwrap();
        let (hb, _) = m.forward_match(&q, &a, &ub, None).unwrap();
        assert_eq!(ha, hb);
        let (hc, _) = m.forward_match(&q, &a, &union(&r("w1 e0 w0", "w2 e0")), None).unwrap();
        assert_ne!(ha, hc);
    }

    #[test]
    fn ranking_distribution() {
        let m = model(5);
        let data = make_synthetic(5, 10, 40).unwrap();
        for r in &data {
            let (o, list) = m.rank_candidates(r, 5).unwrap();
            assert_eq!(o.len(), strength::top_groups(r, 5).len());
            assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(o.iter().all(|&x| x > 0.0 && x < 1.0));
            assert_eq!(list.len(), o.len());
            assert!(list.entries.windows(2).all(|w| w[0].score >= w[1].score));
            let (o1, _) = m.rank_candidates(r, 1).unwrap();
            assert_eq!(o1, vec![1.0]);
        }
        let mut empty = data[0].clone();
        empty.candidates.clear();
        let (o, list) = m.rank_candidates(&empty, 5).unwrap();
        assert!(o.is_empty() && list.is_empty());
        assert!(m.rank_candidates(&data[0], 0).is_err());
    }

    #[test]
    fn identical_match_vectors_give_uniform_output() {
        let emb = Arc::new(synthetic_embeddings(6, 40, 5).unwrap());
        let mut m = CoverageModel::new(dims(), emb, 6).unwrap();
        // the passage-side attention input is all that distinguishes candidates
        m.params.w_m = Tensor2::zeros(12, 24);
        m.params.b_m = Tensor2::filled(12, 1, 0.3);
        let r = &make_synthetic(6, 1, 40).unwrap()[0];
        let (o, _) = m.rank_candidates(r, 4).unwrap();
        for &x in &o {
            assert!((x - 1.0 / o.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn order_invariant_to_group_order() {
        let m = model(7);
        for r in &make_synthetic(7, 5, 40).unwrap() {
            let groups = strength::top_groups(r, 5);
            let (_, a) = m.rank_groups(r, groups.clone()).unwrap();
            let mut rev = groups;
            rev.reverse();
            let (_, b) = m.rank_groups(r, rev).unwrap();
            let key = |l: &RankedList| l.entries.iter().map(|e| e.canonical.clone()).collect::<Vec<_>>();
            assert_eq!(key(&a), key(&b));
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert!((x.score - y.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raising_union_limit_keeps_short_results() {
        let short = model(8);
        let mut long = short.clone();
        long.dims.max_union_len = 10_000;
        let r = &make_synthetic(8, 1, 40).unwrap()[0];
        let union_lengths: Vec<usize> = strength::top_groups(r, 5)
            .iter()
            .map(|g| build_union_passage(r, g, usize::MAX).unwrap().tokens.len())
            .collect();
        assert!(union_lengths.iter().all(|&n| n < short.dims.max_union_len));
        assert_eq!(
            short.rank_candidates(r, 5).unwrap(),
            long.rank_candidates(r, 5).unwrap()
        );
    }

    #[test]
    fn long_inputs_are_truncated() {
        let mut m = model(9);
        m.dims.max_q_len = 2;
        m.dims.max_a_len = 1;
        m.dims.max_union_len = 3;
        let q = seq("w0 w1 w2 w3 w4", TokenSource::Question);
        let a = seq("e0 e1 e2", TokenSource::Answer);
        let (_, t) = m.forward_match(&q, &a, &union_of("w0 w1 w2 w3 w4 w5"), None).unwrap();
        assert_eq!(t.h_q.cols(), 2);
        assert_eq!(t.h_a.cols(), 1);
        assert_eq!(t.h_p.cols(), 3);
    }

    #[test]
    fn dropout_only_when_requested() {
        let m = model(10);
        let q = seq("w0 w1", TokenSource::Question);
        let a = seq("e0", TokenSource::Answer);
        let u = union_of("w0 e0 w1");
        let (plain, _) = m.forward_match(&q, &a, &u, None).unwrap();
        let (again, _) = m.forward_match(&q, &a, &u, None).unwrap();
        assert_eq!(plain, again);
        let mut none = Dropout::new(0.0, 1).unwrap();
        assert_eq!(m.forward_match(&q, &a, &u, Some(&mut none)).unwrap().0, plain);
        let mut heavy = Dropout::new(0.5, 1).unwrap();
        assert_ne!(m.forward_match(&q, &a, &u, Some(&mut heavy)).unwrap().0, plain);
        assert!(Dropout::new(1.0, 1).is_err());
    }

    #[test]
    fn labels_use_normalized_aliases() {
        let r = &make_synthetic(11, 1, 40).unwrap()[0];
        let groups = strength::top_groups(r, usize::MAX);
        let labels = gold_labels(r, &groups);
        assert_eq!(labels.iter().filter(|&&y| y == 1.0).count(), 1);
    }

    #[test]
    fn param_names_match_tensors() {
        for sharing in [EncoderSharing::Shared, EncoderSharing::Separate] {
            let d = ModelDims { sharing, ..dims() };
            let p = CoverageParams::zeros(&d).unwrap();
            assert_eq!(CoverageParams::names(&d).len(), p.tensors().len());
        }
        assert!(CoverageModel::zeros(ModelDims { d: 7, ..dims() }, Arc::new(EmbeddingTable::empty(5))).is_err());
        assert!(ModelDims { l: 5, ..dims() }.validate().is_err());
    }
}
