use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use evirank::textnorm::normalize_answer;
use evirank::{Method, RankedEntry, RankedList};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub answer: String,
    pub score: f64,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// `None` when the question had no candidates.
    pub answer: Option<String>,
    pub score: Option<f64>,
    pub ranking: Vec<Scored>,
}

impl Prediction {
    pub fn from_list(id: &str, list: &RankedList) -> Self {
        Prediction {
            id: id.to_string(),
            answer: list.top().map(|e| e.answer.clone()),
            score: list.top().map(|e| e.score),
            ranking: list
                .entries
                .iter()
                .map(|e| Scored {
                    answer: e.answer.clone(),
                    score: e.score,
                })
                .collect(),
        }
    }

    pub fn to_list(&self, method: Method) -> RankedList {
        RankedList {
            method,
            entries: self
                .ranking
                .iter()
                .map(|s| RankedEntry {
                    canonical: normalize_answer(&s.answer),
                    answer: s.answer.clone(),
                    score: s.score,
                })
                .collect(),
        }
    }
}

pub fn to_jsonl(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("predictions serialize"));
        out.push('\n');
    }
    out
}

/// Reads a predictions file keyed by question id. Duplicate ids are an error.
pub fn load(path: &Path) -> Result<HashMap<String, Prediction>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}: not a prediction", path.display(), i + 1))?;
        if out.contains_key(&p.id) {
            bail!("{}: line {}: duplicate id `{}`", path.display(), i + 1, p.id);
        }
        out.insert(p.id.clone(), p);
    }
    Ok(out)
}
