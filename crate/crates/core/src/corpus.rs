//! Question records, JSONL ingestion, gold injection, dataset statistics
//! and a synthetic dataset generator.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::strength;
use crate::textnorm::{self, EmbeddingTable, TokenSeq, TokenSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    /// Retrieval order, 0 is best.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpan {
    pub text: String,
    pub passage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    pub reader_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub passages: Vec<Passage>,
    pub candidates: Vec<CandidateSpan>,
}

impl QuestionRecord {
    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.id == id)
    }

    /// Passages in retrieval order.
    pub fn passages_by_rank(&self) -> Vec<&Passage> {
        let mut ps: Vec<&Passage> = self.passages.iter().collect();
        ps.sort_by_key(|p| p.rank);
        ps
    }

    /// Whether some candidate normalizes to one of the gold aliases.
    pub fn has_gold_candidate(&self) -> bool {
        let golds: HashSet<String> = self
            .gold_answers
            .iter()
            .map(|g| textnorm::normalize_answer(g))
            .collect();
        self.candidates
            .iter()
            .any(|c| golds.contains(&textnorm::normalize_answer(&c.text)))
    }

    fn validate(&self, line: usize) -> Result<()> {
        let schema = |field: &str, message: String| Error::Schema {
            line,
            field: field.to_string(),
            message,
        };
        let mut ids = HashSet::new();
        for (i, p) in self.passages.iter().enumerate() {
            if !ids.insert(p.id.as_str()) {
                return Err(schema(
                    &format!("passages[{i}].id"),
                    format!("duplicate passage id `{}`", p.id),
                ));
            }
            if p.text.trim().is_empty() {
                return Err(schema(&format!("passages[{i}].text"), "empty passage text".into()));
            }
        }
        let mut ranks = HashSet::new();
        for (i, c) in self.candidates.iter().enumerate() {
            if !ids.contains(c.passage_id.as_str()) {
                return Err(schema(
                    &format!("candidates[{i}].passage_id"),
                    format!("unknown passage `{}`", c.passage_id),
                ));
            }
            if !ranks.insert(c.reader_rank) {
                return Err(schema(
                    &format!("candidates[{i}].reader_rank"),
                    format!("duplicate reader_rank {}", c.reader_rank),
                ));
            }
            if let Some(p) = c.prob {
                if !p.is_finite() || p < 0.0 {
                    return Err(schema(
                        &format!("candidates[{i}].prob"),
                        format!("{p} is not a nonnegative number"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_questions: usize,
    pub avg_passages: f64,
    pub avg_passages_with_gold: f64,
    pub avg_union_passages_topk: f64,
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    Int,
    Num,
    StrArray,
    Array,
}

fn check_field(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    path: &str,
    kind: Kind,
    optional: bool,
    line: usize,
) -> Result<()> {
    let err = |message: &str| Error::Schema {
        line,
        field: path.to_string(),
        message: message.to_string(),
    };
    let v = match obj.get(key) {
        None | Some(Value::Null) if optional => return Ok(()),
        None => return Err(err("missing")),
        Some(v) => v,
    };
    let ok = match kind {
        Kind::Str => v.is_string(),
        Kind::Int => v.is_u64(),
        Kind::Num => v.is_number(),
        Kind::StrArray => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
        Kind::Array => v.is_array(),
    };
    if ok {
        Ok(())
    } else {
        let expected = match kind {
            Kind::Str => "expected a string",
            Kind::Int => "expected a nonnegative integer",
            Kind::Num => "expected a number",
            Kind::StrArray => "expected an array of strings",
            Kind::Array => "expected an array",
        };
        Err(err(expected))
    }
}

fn check_objects(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    fields: &[(&str, Kind, bool)],
    line: usize,
) -> Result<()> {
    let items = obj[key].as_array().expect("checked as array");
    for (i, item) in items.iter().enumerate() {
        let Some(inner) = item.as_object() else {
            return Err(Error::Schema {
                line,
                field: format!("{key}[{i}]"),
                message: "expected an object".into(),
            });
        };
        for &(f, kind, optional) in fields {
            check_field(inner, f, &format!("{key}[{i}].{f}"), kind, optional, line)?;
        }
    }
    Ok(())
}

/// Parses and validates one JSONL line. Candidates come back sorted by
/// reader rank; unknown fields are ignored.
pub fn parse_record(text: &str, line: usize) -> Result<QuestionRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let Some(obj) = value.as_object() else {
        return Err(Error::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    };
    check_field(obj, "id", "id", Kind::Str, false, line)?;
    check_field(obj, "question", "question", Kind::Str, false, line)?;
    check_field(obj, "gold_answers", "gold_answers", Kind::StrArray, false, line)?;
    check_field(obj, "passages", "passages", Kind::Array, false, line)?;
    check_field(obj, "candidates", "candidates", Kind::Array, false, line)?;
    check_objects(
        obj,
        "passages",
        &[
            ("id", Kind::Str, false),
            ("text", Kind::Str, false),
            ("rank", Kind::Int, false),
        ],
        line,
    )?;
    check_objects(
        obj,
        "candidates",
        &[
            ("text", Kind::Str, false),
            ("passage_id", Kind::Str, false),
            ("prob", Kind::Num, true),
            ("reader_rank", Kind::Int, false),
        ],
        line,
    )?;
    let mut record: QuestionRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    record.candidates.sort_by_key(|c| c.reader_rank);
    record.validate(line)?;
    Ok(record)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QuestionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, idx + 1)?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Schema {
                line: idx + 1,
                field: "id".into(),
                message: format!("duplicate record id `{}`", record.id),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn to_jsonl(records: &[QuestionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, records: &[QuestionRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn passage_tokens(p: &Passage) -> TokenSeq {
    textnorm::tokenize_as(&p.text, TokenSource::Passage)
}

fn contains(p: &Passage, answer: &TokenSeq) -> bool {
    !answer.is_empty() && textnorm::contains_answer(&passage_tokens(p), answer).unwrap_or(false)
}

/// Appends the gold answer as a candidate when the reader missed it but some
/// passage contains it. Existing candidates are never touched.
pub fn inject_gold_candidate(record: &QuestionRecord, prob_floor: f64) -> QuestionRecord {
    let mut out = record.clone();
    if record.gold_answers.is_empty() || record.has_gold_candidate() {
        return out;
    }
    let passages = record.passages_by_rank();
    for alias in &record.gold_answers {
        let answer = textnorm::tokenize_as(alias, TokenSource::Answer);
        if let Some(p) = passages.iter().find(|p| contains(p, &answer)) {
            let next_rank = record.candidates.iter().map(|c| c.reader_rank + 1).max().unwrap_or(0);
            out.candidates.push(CandidateSpan {
                text: alias.clone(),
                passage_id: p.id.clone(),
                prob: Some(prob_floor),
                reader_rank: next_rank,
            });
            break;
        }
    }
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Dataset-level passage statistics over records that have candidates.
/// The union-passage average covers each record's first `k` candidate groups.
pub fn compute_stats(records: &[QuestionRecord], k: usize) -> Result<DatasetStats> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if records.is_empty() {
        return Ok(DatasetStats::default());
    }
    let avg_passages = mean(records.iter().map(|r| r.passages.len() as f64));
    let avg_passages_with_gold = mean(records.iter().map(|r| {
        let golds: Vec<TokenSeq> = r
            .gold_answers
            .iter()
            .map(|g| textnorm::tokenize_as(g, TokenSource::Answer))
            .collect();
        r.passages
            .iter()
            .filter(|p| golds.iter().any(|g| contains(p, g)))
            .count() as f64
    }));
    let avg_union_passages_topk = mean(records.iter().filter_map(|r| {
        let groups = strength::top_groups(r, k);
        if groups.is_empty() {
            return None;
        }
        Some(mean(groups.iter().map(|g| {
            let answer = textnorm::tokenize_as(&g.surface, TokenSource::Answer);
            r.passages.iter().filter(|p| contains(p, &answer)).count() as f64
        })))
    }));
    Ok(DatasetStats {
        num_questions: records.len(),
        avg_passages,
        avg_passages_with_gold,
        avg_union_passages_topk,
    })
}

const QUESTION_TOKENS: usize = 4;
const DISTRACTORS: usize = 4;
const GOLD_TOP1_RATE: f64 = 0.3;
const MAX_DISTRACTOR_COVERAGE: usize = QUESTION_TOKENS - 2;
const PASSAGE_TOKENS: usize = 6;

fn vocab_split(vocab_size: usize) -> (usize, usize) {
    let entities = (vocab_size / 5).max(DISTRACTORS + 2);
    (vocab_size - entities, entities)
}

fn content_word(i: usize) -> String {
    format!("w{i}")
}

fn entity_word(i: usize) -> String {
    format!("e{i}")
}

/// Every token [`make_synthetic`] can emit for this vocabulary size.
pub fn synthetic_vocabulary(vocab_size: usize) -> Vec<String> {
    let (content, entities) = vocab_split(vocab_size);
    (0..content)
        .map(content_word)
        .chain((0..entities).map(entity_word))
        .collect()
}

/// Generates records where the gold answer's passages jointly cover every
/// question token (split over two passages) while each distractor's passages
/// cover at most half of them. Every candidate gets two passages of the same
/// length, so neither passage count nor union length gives the gold away.
/// Reader probabilities put the gold first in only about 30% of records.
pub fn make_synthetic(seed: u64, n_questions: usize, vocab_size: usize) -> Result<Vec<QuestionRecord>> {
    if n_questions == 0 {
        return Err(Error::invalid("n_questions must be at least 1"));
    }
    if vocab_size < 20 {
        return Err(Error::invalid("vocab_size must be at least 20"));
    }
    let (n_content, n_entities) = vocab_split(vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_questions);

    for qi in 0..n_questions {
        let content: Vec<usize> = (0..n_content).collect();
        let mut chosen = content.choose_multiple(&mut rng, n_content).copied();
        let question: Vec<String> = chosen.by_ref().take(QUESTION_TOKENS).map(content_word).collect();
        let fillers: Vec<String> = chosen.map(content_word).collect();

        let entity_pool: Vec<usize> = (0..n_entities).collect();
        let entities: Vec<String> = entity_pool
            .choose_multiple(&mut rng, DISTRACTORS + 1)
            .map(|&e| entity_word(e))
            .collect();
        let gold = entities[0].clone();

        // (entity index, tokens); every candidate gets two passages of equal
        // length so only coverage tells the gold apart
        let mut drafts: Vec<(usize, Vec<String>)> = Vec::new();
        let mut passage_with = |rng: &mut ChaCha8Rng, entity: usize, evidence: &[String]| {
            let mut toks = vec![entities[entity].clone()];
            toks.extend_from_slice(evidence);
            let n_fill = PASSAGE_TOKENS - toks.len();
            toks.extend(fillers.choose_multiple(rng, n_fill).cloned());
            toks.shuffle(rng);
            drafts.push((entity, toks));
        };

        let half = QUESTION_TOKENS / 2;
        passage_with(&mut rng, 0, &question[..half]);
        passage_with(&mut rng, 0, &question[half..]);
        for d in 1..=DISTRACTORS {
            let covered = rng.gen_range(1..=MAX_DISTRACTOR_COVERAGE);
            let subset: Vec<String> = question.choose_multiple(&mut rng, covered).cloned().collect();
            let cut = rng.gen_range(0..=subset.len());
            passage_with(&mut rng, d, &subset[..cut]);
            passage_with(&mut rng, d, &subset[cut..]);
        }
        drafts.shuffle(&mut rng);

        let passages: Vec<Passage> = drafts
            .iter()
            .enumerate()
            .map(|(rank, (_, toks))| Passage {
                id: format!("p{rank}"),
                text: format!("{} .", toks.join(" ")),
                rank,
            })
            .collect();

        // one reader span per passage, naming that passage's entity
        let mut spans: Vec<(usize, String, f64)> = drafts
            .iter()
            .map(|(entity, _)| {
                let text = if rng.gen_bool(0.3) {
                    entities[*entity].to_uppercase()
                } else {
                    entities[*entity].clone()
                };
                (*entity, text, rng.gen_range(0.05..1.0))
            })
            .collect();
        let best_of = |spans: &[(usize, String, f64)], gold_side: bool| {
            spans
                .iter()
                .enumerate()
                .filter(|(_, s)| (s.0 == 0) == gold_side)
                .max_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
                .map(|(i, _)| i)
                .expect("both sides have spans")
        };
        let gold_first = rng.gen_bool(GOLD_TOP1_RATE);
        let (g, d) = (best_of(&spans, true), best_of(&spans, false));
        let gold_is_first = spans[g].2 > spans[d].2;
        if gold_first != gold_is_first {
            let (pg, pd) = (spans[g].2, spans[d].2);
            spans[g].2 = pd;
            spans[d].2 = pg;
        }
        let total: f64 = spans.iter().map(|s| s.2).sum();
        let mut order: Vec<usize> = (0..spans.len()).collect();
        order.sort_by(|&a, &b| spans[b].2.total_cmp(&spans[a].2).then(a.cmp(&b)));
        let candidates = order
            .iter()
            .enumerate()
            .map(|(reader_rank, &i)| CandidateSpan {
                text: spans[i].1.clone(),
                passage_id: passages[i].id.clone(),
                prob: Some(spans[i].2 / total),
                reader_rank,
            })
            .collect();

        records.push(QuestionRecord {
            id: format!("syn-{seed}-{qi}"),
            question: format!("{} ?", question.join(" ")),
            gold_answers: vec![gold],
            passages,
            candidates,
        });
    }
    Ok(records)
}

/// Vocabulary size used by `evirank synth` and the desk-scale experiments.
pub const DEFAULT_SYNTHETIC_VOCAB: usize = 100;

/// Entry bound of [`synthetic_embeddings`].
pub const SYNTHETIC_EMBEDDING_SCALE: f64 = 32.0;

/// Fixed random vectors for the synthetic vocabulary, standing in for
/// pretrained embeddings. Entries are uniform in
/// `[-SYNTHETIC_EMBEDDING_SCALE, SYNTHETIC_EMBEDDING_SCALE]`; at this size the
/// encoder gates saturate and each word gets a near-binary code, so attention
/// can single out matching tokens at small `l`.
pub fn synthetic_embeddings(seed: u64, vocab_size: usize, dim: usize) -> Result<EmbeddingTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4be_dd15_u64);
    let vectors = synthetic_vocabulary(vocab_size)
        .into_iter()
        .map(|tok| {
            (
                tok,
                (0..dim)
                    .map(|_| rng.gen_range(-SYNTHETIC_EMBEDDING_SCALE..=SYNTHETIC_EMBEDDING_SCALE))
                    .collect(),
            )
        })
        .collect();
    EmbeddingTable::from_vectors(dim, vectors)
}
