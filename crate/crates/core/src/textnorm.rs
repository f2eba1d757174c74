//! Tokenization, SQuAD-style answer normalization, EM/F1 and embeddings.
//!
//! One notion of answer equality is used throughout the crate:
//! [`normalize_answer`] (lowercase, drop ASCII punctuation, drop the articles
//! `a`/`an`/`the`, collapse whitespace). Metrics and candidate grouping both
//! go through it.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Question,
    Passage,
    Answer,
}

/// A tokenized text. Tokens are never empty strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub source: TokenSource,
}

impl TokenSeq {
    pub fn new(tokens: Vec<String>, source: TokenSource) -> Self {
        let tokens = tokens.into_iter().filter(|t| !t.is_empty()).collect();
        TokenSeq { tokens, source }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps at most `max_len` leading tokens. Returns whether anything was cut.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        let cut = self.tokens.len() > max_len;
        self.tokens.truncate(max_len);
        cut
    }
}

/// Lowercases and splits on every non-alphanumeric character; punctuation
/// never survives as a token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize_as(text: &str, source: TokenSource) -> TokenSeq {
    TokenSeq {
        tokens: tokenize(text),
        source,
    }
}

fn article_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("static regex"))
}

/// SQuAD answer normalization.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punc: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = article_regex().replace_all(&no_punc, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn require_golds(golds: &[impl AsRef<str>]) -> Result<()> {
    if golds.is_empty() {
        return Err(Error::Empty("gold answer list".into()));
    }
    Ok(())
}

pub fn exact_match(prediction: &str, golds: &[impl AsRef<str>]) -> Result<bool> {
    require_golds(golds)?;
    let pred = normalize_answer(prediction);
    Ok(golds.iter().any(|g| normalize_answer(g.as_ref()) == pred))
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred = normalize_answer(pred);
    let gold = normalize_answer(gold);
    let pred_toks: Vec<&str> = pred.split_whitespace().collect();
    let gold_toks: Vec<&str> = gold.split_whitespace().collect();
    match (pred_toks.is_empty(), gold_toks.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_toks {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_toks {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_toks.len() as f64;
    let recall = overlap as f64 / gold_toks.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1, maximized over gold aliases.
pub fn f1_score(prediction: &str, golds: &[impl AsRef<str>]) -> Result<f64> {
    require_golds(golds)?;
    Ok(golds
        .iter()
        .map(|g| token_f1(prediction, g.as_ref()))
        .fold(0.0, f64::max))
}

fn strip_articles(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| t.to_lowercase())
        .filter(|t| !ARTICLES.contains(&t.as_str()))
        .collect()
}

/// Whether `answer` occurs as a contiguous run of tokens in `passage`, after
/// lowercasing and dropping articles on both sides. An answer made only of
/// articles is matched literally.
pub fn contains_answer(passage: &TokenSeq, answer: &TokenSeq) -> Result<bool> {
    if answer.is_empty() {
        return Err(Error::Empty("answer token sequence".into()));
    }
    let mut needle = strip_articles(&answer.tokens);
    let hay = if needle.is_empty() {
        needle = answer.tokens.iter().map(|t| t.to_lowercase()).collect();
        passage.tokens.iter().map(|t| t.to_lowercase()).collect()
    } else {
        strip_articles(&passage.tokens)
    };
    Ok(hay.windows(needle.len()).any(|w| w == needle.as_slice()))
}

/// Fixed word vectors. Out-of-vocabulary tokens map to the zero vector and
/// nothing here is ever updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    zero: Vec<f64>,
}

impl EmbeddingTable {
    pub fn empty(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            zero: vec![0.0; dim],
        }
    }

    pub fn from_vectors(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if let Some((tok, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::invalid(format!(
                "embedding for `{tok}` has {} values, expected {dim}",
                v.len()
            )));
        }
        if vectors.values().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(EmbeddingTable {
            dim,
            vectors,
            zero: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn trainable(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        self.vectors.get(token).map(Vec::as_slice).unwrap_or(&self.zero)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    fn sorted(&self) -> Vec<(&String, &Vec<f64>)> {
        let mut entries: Vec<_> = self.vectors.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
    }

    /// SHA-256 over the sorted vocabulary and the exact bits of every vector.
    pub fn vocab_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for (tok, v) in self.sorted() {
            hasher.update((tok.len() as u64).to_le_bytes());
            hasher.update(tok.as_bytes());
            for x in v {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Writes word2vec-text format, tokens sorted, floats in round-trip form.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (tok, v) in self.sorted() {
            out.push_str(tok);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `token v1 .. vd` lines. A leading `count dim` header line is
/// skipped. With no path the table is empty and every lookup is zero.
pub fn load_embeddings(path: Option<&Path>, dim: usize) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let Some(path) = path else {
        return Ok(EmbeddingTable::empty(dim));
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vectors = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if line_no == 1 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        if rest.len() != dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {dim} values, found {}", rest.len()),
            });
        }
        let mut v = Vec::with_capacity(dim);
        for field in rest {
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{field}` is not a number"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "non-finite value".into(),
                });
            }
            v.push(x);
        }
        vectors.entry(token.to_string()).or_insert(v);
    }
    EmbeddingTable::from_vectors(dim, vectors)
}
