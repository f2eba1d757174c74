//! Strength-based re-ranking: spans naming the same answer are grouped and
//! scored by how many there are, or by their summed reader probability.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateSpan, QuestionRecord};
use crate::error::{Error, Result};
use crate::textnorm::normalize_answer;

/// Default span budget for the strength re-rankers.
pub const DEFAULT_STRENGTH_K: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    /// Normalized answer text shared by every span in the group.
    pub canonical: String,
    /// Raw text of the highest-probability span.
    pub surface: String,
    pub count: usize,
    pub prob_sum: f64,
    pub best_reader_rank: usize,
    pub supporting_passages: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Base reader order, used for recall upper bounds.
    Base,
    Count,
    Prob,
    Bm25,
    Coverage,
    Full,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Count => "count",
            Method::Prob => "prob",
            Method::Bm25 => "bm25",
            Method::Coverage => "coverage",
            Method::Full => "full",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => Method::Base,
            "count" => Method::Count,
            "prob" => Method::Prob,
            "bm25" => Method::Bm25,
            "coverage" => Method::Coverage,
            "full" => Method::Full,
            other => return Err(Error::invalid(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub answer: String,
    pub canonical: String,
    pub score: f64,
}

/// Answers in descending score order, unique by canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub method: Method,
    pub entries: Vec<RankedEntry>,
}

#[derive(Serialize, Deserialize)]
struct RankedListLine {
    id: String,
    method: Method,
    ranking: Vec<(String, f64)>,
}

impl RankedList {
    pub fn empty(method: Method) -> Self {
        RankedList {
            method,
            entries: Vec::new(),
        }
    }

    pub fn top(&self) -> Option<&RankedEntry> {
        self.entries.first()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json_line(&self, id: &str) -> String {
        let line = RankedListLine {
            id: id.to_string(),
            method: self.method,
            ranking: self.entries.iter().map(|e| (e.answer.clone(), e.score)).collect(),
        };
        serde_json::to_string(&line).expect("ranked list serializes")
    }

    pub fn from_json_line(text: &str) -> Result<(String, RankedList)> {
        let line: RankedListLine = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        let entries = line
            .ranking
            .into_iter()
            .map(|(answer, score)| RankedEntry {
                canonical: normalize_answer(&answer),
                answer,
                score,
            })
            .collect();
        Ok((
            line.id,
            RankedList {
                method: line.method,
                entries,
            },
        ))
    }
}

fn group_spans<'a>(spans: impl IntoIterator<Item = &'a CandidateSpan>) -> Vec<CandidateGroup> {
    let mut spans: Vec<&CandidateSpan> = spans.into_iter().collect();
    spans.sort_by_key(|s| s.reader_rank);
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<CandidateGroup> = Vec::new();
    let mut best_prob: Vec<f64> = Vec::new();
    for span in spans {
        let canonical = normalize_answer(&span.text);
        let prob = span.prob.unwrap_or(0.0);
        match index.get(&canonical) {
            Some(&i) => {
                let g = &mut groups[i];
                g.count += 1;
                g.prob_sum += prob;
                g.supporting_passages.insert(span.passage_id.clone());
                if prob > best_prob[i] {
                    best_prob[i] = prob;
                    g.surface = span.text.clone();
                }
            }
            None => {
                index.insert(canonical.clone(), groups.len());
                best_prob.push(prob);
                groups.push(CandidateGroup {
                    canonical,
                    surface: span.text.clone(),
                    count: 1,
                    prob_sum: prob,
                    best_reader_rank: span.reader_rank,
                    supporting_passages: BTreeSet::from([span.passage_id.clone()]),
                });
            }
        }
    }
    groups
}

fn top_spans(record: &QuestionRecord, k: usize) -> Vec<&CandidateSpan> {
    let mut spans: Vec<&CandidateSpan> = record.candidates.iter().collect();
    spans.sort_by_key(|s| s.reader_rank);
    spans.truncate(k);
    spans
}

/// Groups the top-`k` reader spans by normalized text, in order of each
/// group's best reader rank.
pub fn group_candidates(record: &QuestionRecord, k: usize) -> Result<Vec<CandidateGroup>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(group_spans(top_spans(record, k)))
}

/// The first `k` groups formed from all spans: the re-ranked units of the
/// BM25 and coverage re-rankers.
pub fn top_groups(record: &QuestionRecord, k: usize) -> Vec<CandidateGroup> {
    let mut groups = group_spans(&record.candidates);
    groups.truncate(k);
    groups
}

/// Orders `(group, score)` pairs by score, then prob_sum, then best reader
/// rank, then canonical text.
pub(crate) fn order_groups(method: Method, mut scored: Vec<(CandidateGroup, f64)>) -> RankedList {
    scored.sort_by(|(ga, sa), (gb, sb)| {
        sb.total_cmp(sa)
            .then_with(|| gb.prob_sum.total_cmp(&ga.prob_sum))
            .then_with(|| ga.best_reader_rank.cmp(&gb.best_reader_rank))
            .then_with(|| ga.canonical.cmp(&gb.canonical))
    });
    RankedList {
        method,
        entries: scored
            .into_iter()
            .map(|(g, score)| RankedEntry {
                answer: g.surface,
                canonical: g.canonical,
                score,
            })
            .collect(),
    }
}

pub fn rerank_by_count(record: &QuestionRecord, k: usize) -> Result<RankedList> {
    let groups = group_candidates(record, k)?;
    Ok(order_groups(
        Method::Count,
        groups
            .into_iter()
            .map(|g| {
                let s = g.count as f64;
                (g, s)
            })
            .collect(),
    ))
}

pub fn rerank_by_probability(record: &QuestionRecord, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let spans = top_spans(record, k);
    if let Some(s) = spans.iter().find(|s| s.prob.is_none()) {
        return Err(Error::MissingProbability {
            text: s.text.clone(),
            reader_rank: s.reader_rank,
        });
    }
    let groups = group_spans(spans);
    Ok(order_groups(
        Method::Prob,
        groups
            .into_iter()
            .map(|g| {
                let s = g.prob_sum;
                (g, s)
            })
            .collect(),
    ))
}

/// Groups in base-reader order; the score is the negated best reader rank.
pub fn base_ranking(record: &QuestionRecord, k: usize) -> RankedList {
    RankedList {
        method: Method::Base,
        entries: top_groups(record, k)
            .into_iter()
            .map(|g| RankedEntry {
                score: -(g.best_reader_rank as f64),
                answer: g.surface,
                canonical: g.canonical,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic, Passage};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn toy(spans: &[(&str, &str, Option<f64>)]) -> QuestionRecord {
        QuestionRecord {
            id: "t".into(),
            question: "who sang".into(),
            gold_answers: vec!["danny boy".into()],
            passages: (1..=3)
                .map(|i| Passage {
                    id: format!("p{i}"),
                    text: format!("passage {i}"),
                    rank: i - 1,
                })
                .collect(),
            candidates: spans
                .iter()
                .enumerate()
                .map(|(i, (t, p, prob))| CandidateSpan {
                    text: t.to_string(),
                    passage_id: p.to_string(),
                    prob: *prob,
                    reader_rank: i,
                })
                .collect(),
        }
    }

    fn danny() -> QuestionRecord {
        toy(&[
            ("Danny Boy", "p1", Some(0.3)),
            ("danny boy!", "p2", Some(0.2)),
            ("London", "p3", Some(0.4)),
        ])
    }

    #[test]
    fn grouping_example() {
        let groups = group_candidates(&danny(), 3).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].canonical, "danny boy");
        assert_eq!(groups[0].count, 2);
        assert!((groups[0].prob_sum - 0.5).abs() < 1e-15);
        assert_eq!(groups[0].surface, "Danny Boy");
        assert_eq!(groups[0].supporting_passages.len(), 2);
        assert_eq!(groups[1].canonical, "london");
        assert_eq!(groups[1].count, 1);
        assert_eq!(groups[1].prob_sum, 0.4);

        let one = group_candidates(&danny(), 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].count, 1);

        let same = toy(&[("x", "p1", None), ("X", "p2", None), ("x.", "p3", None)]);
        let g = group_candidates(&same, 3).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].count, 3);
        assert_eq!(g[0].prob_sum, 0.0);
        assert!(group_candidates(&same, 0).is_err());
        assert!(group_candidates(&toy(&[]), 5).unwrap().is_empty());
    }

    #[test]
    fn count_rerank() {
        let r = rerank_by_count(&danny(), 3).unwrap();
        let order: Vec<(&str, f64)> = r.entries.iter().map(|e| (e.canonical.as_str(), e.score)).collect();
        assert_eq!(order, vec![("danny boy", 2.0), ("london", 1.0)]);

        let single = toy(&[("paris", "p1", None)]);
        assert_eq!(rerank_by_count(&single, 5).unwrap().top().unwrap().answer, "paris");

        let tie = toy(&[
            ("a", "p1", Some(0.25)),
            ("b", "p1", Some(0.3)),
            ("a", "p2", Some(0.25)),
            ("b", "p3", Some(0.3)),
        ]);
        let r = rerank_by_count(&tie, 4).unwrap();
        assert_eq!(r.entries[0].canonical, "b");
        assert!(rerank_by_count(&toy(&[]), 5).unwrap().is_empty());
    }

    #[test]
    fn probability_rerank() {
        let r = rerank_by_probability(&danny(), 3).unwrap();
        assert_eq!(r.entries[0].canonical, "danny boy");
        assert!((r.entries[0].score - 0.5).abs() < 1e-15);
        assert_eq!(r.entries[1].score, 0.4);

        let one = toy(&[("x", "p1", Some(0.7))]);
        assert_eq!(rerank_by_probability(&one, 5).unwrap().entries[0].score, 0.7);

        let missing = toy(&[("x", "p1", Some(0.7)), ("y", "p2", None)]);
        match rerank_by_probability(&missing, 5) {
            Err(Error::MissingProbability { text, .. }) => assert_eq!(text, "y"),
            other => panic!("unexpected {other:?}"),
        }
        // the missing span lies outside the top-1 window
        assert!(rerank_by_probability(&missing, 1).is_ok());
    }

    #[test]
    fn ranked_list_json() {
        let r = rerank_by_count(&danny(), 3).unwrap();
        let line = r.to_json_line("q1");
        assert_eq!(
            line,
            r#"{"id":"q1","method":"count","ranking":[["Danny Boy",2.0],["London",1.0]]}"#
        );
        let (id, back) = RankedList::from_json_line(&line).unwrap();
        assert_eq!(id, "q1");
        assert_eq!(back, r);
    }

    fn oracle_top(record: &QuestionRecord, k: usize, by_prob: bool) -> String {
        let mut score: HashMap<String, (f64, f64, usize)> = HashMap::new();
        for c in record.candidates.iter().filter(|c| c.reader_rank < k) {
            let e = score.entry(normalize_answer(&c.text)).or_insert((0.0, 0.0, usize::MAX));
            e.0 += 1.0;
            e.1 += c.prob.unwrap_or(0.0);
            e.2 = e.2.min(c.reader_rank);
        }
        let mut v: Vec<_> = score.into_iter().collect();
        v.sort_by(|a, b| {
            let (pa, pb) = if by_prob { (a.1 .1, b.1 .1) } else { (a.1 .0, b.1 .0) };
            pb.total_cmp(&pa)
                .then(b.1 .1.total_cmp(&a.1 .1))
                .then(a.1 .2.cmp(&b.1 .2))
                .then(a.0.cmp(&b.0))
        });
        v[0].0.clone()
    }

    #[test]
    fn matches_bruteforce_on_synthetic() {
        for r in make_synthetic(7, 100, 40).unwrap() {
            assert_eq!(
                rerank_by_count(&r, 50).unwrap().entries[0].canonical,
                oracle_top(&r, 50, false)
            );
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000) {
            let mut r = make_synthetic(seed, 1, 30).unwrap().remove(0);
            let before_c = rerank_by_count(&r, 50).unwrap();
            let before_p = rerank_by_probability(&r, 50).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            r.candidates.shuffle(&mut rng);
            prop_assert_eq!(rerank_by_count(&r, 50).unwrap(), before_c);
            prop_assert_eq!(rerank_by_probability(&r, 50).unwrap(), before_p);
        }

        #[test]
        fn split_probability_invariant(p in 0.01f64..0.9, frac in 0.05f64..0.95) {
            let whole = toy(&[("x", "p1", Some(p)), ("y", "p2", Some(0.5))]);
            let split = toy(&[("x", "p1", Some(p * frac)), ("y", "p2", Some(0.5)), ("x", "p3", Some(p - p * frac))]);
            let a = rerank_by_probability(&whole, 5).unwrap();
            let b = rerank_by_probability(&split, 5).unwrap();
            let score = |l: &RankedList, c: &str| l.entries.iter().find(|e| e.canonical == c).unwrap().score;
            prop_assert!((score(&a, "x") - score(&b, "x")).abs() < 1e-12);
        }
    }
}
