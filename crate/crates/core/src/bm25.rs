//! BM25 re-ranking of candidates by their union passages. Document
//! frequencies come from the raw retrieved passages, before aggregation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::QuestionRecord;
use crate::coverage::build_union_passage;
use crate::error::{Error, Result};
use crate::strength::{self, Method, RankedList};
use crate::textnorm::{self, TokenSeq, TokenSource};

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    pub doc_count: usize,
    pub df: HashMap<String, usize>,
    pub avgdl: f64,
}

impl IdfTable {
    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, token: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.df(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("bm25 parameters out of range: k1={k1}, b={b}")));
        }
        Ok(Bm25Params { k1, b })
    }
}

/// Where document frequencies are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IdfScope {
    /// Only the passages retrieved for the question being ranked.
    #[default]
    Question,
    /// Every passage in the dataset.
    Corpus,
}

/// Each raw passage is one document.
pub fn build_idf(records: &[QuestionRecord]) -> Result<IdfTable> {
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut docs = 0usize;
    let mut total_len = 0usize;
    for p in records.iter().flat_map(|r| &r.passages) {
        let toks = textnorm::tokenize(&p.text);
        docs += 1;
        total_len += toks.len();
        let unique: HashSet<&String> = toks.iter().collect();
        for t in unique {
            *df.entry(t.clone()).or_default() += 1;
        }
    }
    if docs == 0 {
        return Err(Error::Empty("no passages to compute IDF from".into()));
    }
    if total_len == 0 {
        return Err(Error::Empty("passages contain no tokens".into()));
    }
    Ok(IdfTable {
        doc_count: docs,
        df,
        avgdl: total_len as f64 / docs as f64,
    })
}

pub fn bm25_score(query: &TokenSeq, doc: &TokenSeq, idf: &IdfTable, params: Bm25Params) -> Result<f64> {
    if doc.is_empty() {
        return Err(Error::Empty("bm25 document".into()));
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in &doc.tokens {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let norm = 1.0 - params.b + params.b * doc.len() as f64 / idf.avgdl;
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for t in &query.tokens {
        if !seen.insert(t.as_str()) {
            continue;
        }
        let Some(&f) = tf.get(t.as_str()) else { continue };
        let f = f as f64;
        score += idf.idf(t) * f * (params.k1 + 1.0) / (f + params.k1 * norm);
    }
    Ok(score)
}

/// Scores each of the top-`k` candidate groups by BM25 between the question
/// and the group's union passage. A candidate found in no passage scores 0.
pub fn rerank_bm25(record: &QuestionRecord, idf: &IdfTable, params: Bm25Params, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let query = textnorm::tokenize_as(&record.question, TokenSource::Question);
    let mut scored = Vec::new();
    for group in strength::top_groups(record, k) {
        let union = build_union_passage(record, &group, usize::MAX)?;
        let s = if union.tokens.is_empty() {
            0.0
        } else {
            bm25_score(&query, &union.tokens, idf, params)?
        };
        scored.push((group, s));
    }
    Ok(strength::order_groups(Method::Bm25, scored))
}

/// Reranks every record, counting document frequencies per `scope`.
pub fn rerank_all(
    records: &[QuestionRecord],
    scope: IdfScope,
    params: Bm25Params,
    k: usize,
) -> Result<Vec<RankedList>> {
    let corpus_idf = match scope {
        IdfScope::Corpus => Some(build_idf(records)?),
        IdfScope::Question => None,
    };
    records
        .iter()
        .map(|r| match &corpus_idf {
            Some(idf) => rerank_bm25(r, idf, params, k),
            None if r.passages.is_empty() => Ok(RankedList::empty(Method::Bm25)),
            None => rerank_bm25(r, &build_idf(std::slice::from_ref(r))?, params, k),
        })
        .collect()
}
