//! The full re-ranker, a weighted sum of re-normalized method scores, and the
//! evaluation harness.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::strength::{Method, RankedEntry, RankedList};
use crate::textnorm::{self, exact_match, f1_score};

/// Candidates kept from each method before combining.
pub const DEFAULT_COMBINE_K: usize = 5;

/// Softmax-normalized scores of one method's top entries, in its rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub method: Method,
    pub entries: Vec<RankedEntry>,
}

impl MethodScores {
    pub fn score(&self, canonical: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.canonical == canonical).map(|e| e.score)
    }

    fn position(&self, canonical: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.canonical == canonical)
    }
}

/// Softmax over the raw scores of the first `k` entries.
pub fn renormalize_topk(list: &RankedList, k: usize) -> Result<MethodScores> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let top = &list.entries[..list.len().min(k)];
    let max = top.iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = top.iter().map(|e| (e.score - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(MethodScores {
        method: list.method,
        entries: top
            .iter()
            .zip(exps)
            .map(|(e, x)| RankedEntry {
                score: x / total,
                ..e.clone()
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights {
    pub w_count: f64,
    pub w_prob: f64,
    pub w_cov: f64,
}

impl Default for CombinationWeights {
    fn default() -> Self {
        CombinationWeights {
            w_count: 1.0 / 3.0,
            w_prob: 1.0 / 3.0,
            w_cov: 1.0 / 3.0,
        }
    }
}

impl CombinationWeights {
    pub fn new(w_count: f64, w_prob: f64, w_cov: f64) -> Result<Self> {
        let w = CombinationWeights { w_count, w_prob, w_cov };
        let ws = w.as_array();
        if ws.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("combination weights must be finite and nonnegative"));
        }
        if ws.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid("combination weights are all zero"));
        }
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_count, self.w_prob, self.w_cov]
    }
}

/// Sums weighted scores per canonical answer; an answer missing from a method
/// gets 0 from it. Ties go to the answer ranked earliest by any method with
/// nonzero weight, then to the smaller canonical string.
pub fn combine(count: &MethodScores, prob: &MethodScores, cov: &MethodScores, w: CombinationWeights) -> RankedList {
    let inputs = [(count, w.w_count), (prob, w.w_prob), (cov, w.w_cov)];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut rows: Vec<(RankedEntry, usize)> = Vec::new();
    for (scores, _) in inputs {
        for e in &scores.entries {
            if seen.contains_key(e.canonical.as_str()) {
                continue;
            }
            seen.insert(&e.canonical, rows.len());
            let mut total = 0.0;
            let mut pos = usize::MAX;
            for (other, weight) in inputs {
                if let Some(s) = other.score(&e.canonical) {
                    total += weight * s;
                }
                if weight > 0.0 {
                    if let Some(p) = other.position(&e.canonical) {
                        pos = pos.min(p);
                    }
                }
            }
            rows.push((
                RankedEntry {
                    answer: e.answer.clone(),
                    canonical: e.canonical.clone(),
                    score: total,
                },
                pos,
            ));
        }
    }
    rows.sort_by(|(a, pa), (b, pb)| {
        b.score
            .total_cmp(&a.score)
            .then(pa.cmp(pb))
            .then_with(|| a.canonical.cmp(&b.canonical))
    });
    RankedList {
        method: Method::Full,
        entries: rows.into_iter().map(|(e, _)| e).collect(),
    }
}

/// The three inputs of the full re-ranker for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRankings {
    pub count: RankedList,
    pub prob: RankedList,
    pub coverage: RankedList,
}

impl MethodRankings {
    /// Re-normalizes the top `k` of each list and combines them.
    pub fn full(&self, w: CombinationWeights, k: usize) -> Result<RankedList> {
        Ok(combine(
            &renormalize_topk(&self.count, k)?,
            &renormalize_topk(&self.prob, k)?,
            &renormalize_topk(&self.coverage, k)?,
            w,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    /// Keyed by gold answer length in tokens: "1", "2", "3", "4+".
    pub per_bucket: BTreeMap<String, BucketScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn length_bucket(gold: &str) -> &'static str {
    match textnorm::normalize_answer(gold).split_whitespace().count() {
        0 | 1 => "1",
        2 => "2",
        3 => "3",
        _ => "4+",
    }
}

/// Mean EM and F1 over records with gold answers. A record without a
/// prediction scores 0 on both. Buckets use the first gold alias's length.
pub fn evaluate(predictions: &HashMap<String, String>, records: &[QuestionRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let (mut em, mut f1, mut n) = (0.0, 0.0, 0usize);
    for r in records {
        let Some(first) = r.gold_answers.first() else {
            continue;
        };
        let (e, f) = match predictions.get(&r.id) {
            Some(pred) => (
                f64::from(u8::from(exact_match(pred, &r.gold_answers)?)),
                f1_score(pred, &r.gold_answers)?,
            ),
            None => (0.0, 0.0),
        };
        em += e;
        f1 += f;
        n += 1;
        let b = sums.entry(length_bucket(first).to_string()).or_default();
        b.0 += e;
        b.1 += f;
        b.2 += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no record has gold answers".into()));
    }
    Ok(EvalReport {
        em: em / n as f64,
        f1: f1 / n as f64,
        n,
        per_bucket: sums
            .into_iter()
            .map(|(k, (e, f, c))| {
                (
                    k,
                    BucketScore {
                        em: e / c as f64,
                        f1: f / c as f64,
                        n: c,
                    },
                )
            })
            .collect(),
    })
}

/// Top-ranked answer of each list, keyed by record id.
pub fn top_predictions(records: &[QuestionRecord], lists: &[RankedList]) -> HashMap<String, String> {
    records
        .iter()
        .zip(lists)
        .filter_map(|(r, l)| l.top().map(|t| (r.id.clone(), t.answer.clone())))
        .collect()
}

pub fn evaluate_lists(records: &[QuestionRecord], lists: &[RankedList]) -> Result<EvalReport> {
    if records.len() != lists.len() {
        return Err(Error::invalid(format!(
            "{} records but {} rankings",
            records.len(),
            lists.len()
        )));
    }
    evaluate(&top_predictions(records, lists), records)
}

/// Enumerates the simplex grid with spacing `step` and keeps the weights with
/// the best dev F1, then EM, then the lexicographically largest weights.
pub fn grid_search_weights(
    dev: &[QuestionRecord],
    rankings: &[MethodRankings],
    step: f64,
    k: usize,
) -> Result<(CombinationWeights, EvalReport)> {
    if dev.is_empty() {
        return Err(Error::Empty("grid search needs a dev set".into()));
    }
    if dev.len() != rankings.len() {
        return Err(Error::invalid(format!(
            "{} records but {} rankings",
            dev.len(),
            rankings.len()
        )));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    if ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("grid step {step} does not divide 1")));
    }
    let grid: Vec<(usize, usize, usize)> = (0..=n)
        .flat_map(|i| (0..=n - i).map(move |j| (i, j, n - i - j)))
        .collect();
    let results: Vec<(CombinationWeights, EvalReport)> = grid
        .par_iter()
        .map(|&(i, j, m)| {
            let unit = 1.0 / n as f64;
            let w = CombinationWeights::new(i as f64 * unit, j as f64 * unit, m as f64 * unit)?;
            let lists = rankings.iter().map(|r| r.full(w, k)).collect::<Result<Vec<_>>>()?;
            Ok((w, evaluate_lists(dev, &lists)?))
        })
        .collect::<Result<_>>()?;
    let best = results
        .into_iter()
        .max_by(|(wa, ra), (wb, rb)| {
            ra.f1.total_cmp(&rb.f1).then(ra.em.total_cmp(&rb.em)).then_with(|| {
                let (a, b) = (wa.as_array(), wb.as_array());
                a[0].total_cmp(&b[0])
                    .then(a[1].total_cmp(&b[1]))
                    .then(a[2].total_cmp(&b[2]))
            })
        })
        .expect("grid is never empty");
    Ok(best)
}

/// Number of points the grid search visits for a step dividing 1.
pub fn grid_size(step: f64) -> usize {
    let n = (1.0 / step).round() as usize;
    (n + 1) * (n + 2) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub em: f64,
    pub f1: f64,
}

/// Best achievable EM and F1 when an oracle picks among the first `k`
/// candidates: per record the best-EM candidate wins, then the best F1.
pub fn topk_recall(records: &[QuestionRecord], lists: &[RankedList], ks: &[usize]) -> Result<Vec<RecallRow>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be nonempty and every k at least 1"));
    }
    if records.len() != lists.len() {
        return Err(Error::invalid(format!(
            "{} records but {} rankings",
            records.len(),
            lists.len()
        )));
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);
    // best (em, f1) after each prefix length, per record
    let mut prefix_best: Vec<Vec<(f64, f64)>> = Vec::new();
    for (r, l) in records.iter().zip(lists) {
        if r.gold_answers.is_empty() {
            continue;
        }
        let mut best = (0.0, 0.0);
        let mut row = Vec::with_capacity(max_k);
        for i in 0..max_k {
            if let Some(e) = l.entries.get(i) {
                let s = (
                    f64::from(u8::from(exact_match(&e.answer, &r.gold_answers)?)),
                    f1_score(&e.answer, &r.gold_answers)?,
                );
                if s.0 > best.0 || (s.0 == best.0 && s.1 > best.1) {
                    best = s;
                }
            }
            row.push(best);
        }
        prefix_best.push(row);
    }
    let n = prefix_best.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let (em, f1) = prefix_best
                .iter()
                .fold((0.0, 0.0), |(e, f), row| (e + row[k - 1].0, f + row[k - 1].1));
            RecallRow {
                k,
                em: em / n,
                f1: f1 / n,
            }
        })
        .collect())
}

pub fn recall_csv(rows: &[RecallRow]) -> String {
    let mut out = String::from("k,em,f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.k, r.em, r.f1);
    }
    out
}

pub fn recall_table(rows: &[RecallRow]) -> String {
    let mut out = format!("{:>5}  {:>8}  {:>8}\n", "k", "em", "f1");
    for r in rows {
        let _ = writeln!(out, "{:>5}  {:>8.4}  {:>8.4}", r.k, r.em, r.f1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_synthetic;
    use crate::strength;
    use proptest::prelude::*;

    fn list(method: Method, items: &[(&str, f64)]) -> RankedList {
        RankedList {
            method,
            entries: items
                .iter()
                .map(|&(a, s)| RankedEntry {
                    answer: a.to_string(),
                    canonical: textnorm::normalize_answer(a),
                    score: s,
                })
                .collect(),
        }
    }

    fn record(id: &str, gold: &str) -> QuestionRecord {
        QuestionRecord {
            id: id.into(),
            question: "q".into(),
            gold_answers: vec![gold.into()],
            passages: vec![],
            candidates: vec![],
        }
    }

    #[test]
    fn softmax_examples() {
        let s = renormalize_topk(&list(Method::Count, &[("x", 2.0), ("y", 1.0)]), 5).unwrap();
        let e = std::f64::consts::E;
        assert!((s.entries[0].score - e * e / (e * e + e)).abs() < 1e-12);
        assert!((s.entries[0].score - 0.7311).abs() < 1e-4);
        assert!((s.entries[1].score - 0.2689).abs() < 1e-4);
        let s = renormalize_topk(&list(Method::Count, &[("x", 3.0), ("y", 3.0), ("z", 3.0)]), 2).unwrap();
        assert_eq!(s.entries.len(), 2);
        assert!(s.entries.iter().all(|e| (e.score - 0.5).abs() < 1e-15));
        let s = renormalize_topk(&list(Method::Prob, &[("x", -40.0)]), 5).unwrap();
        assert_eq!(s.entries[0].score, 1.0);
        assert!(renormalize_topk(&RankedList::empty(Method::Prob), 5)
            .unwrap()
            .entries
            .is_empty());
        assert!(renormalize_topk(&RankedList::empty(Method::Prob), 0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(scores in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
            let names: Vec<String> = (0..scores.len()).map(|i| format!("a{i}")).collect();
            let items: Vec<(&str, f64)> = names.iter().map(String::as_str).zip(scores.iter().copied()).collect();
            let shifted: Vec<(&str, f64)> = items.iter().map(|&(a, s)| (a, s + c)).collect();
            let a = renormalize_topk(&list(Method::Count, &items), 5).unwrap();
            let b = renormalize_topk(&list(Method::Count, &shifted), 5).unwrap();
            let total: f64 = a.entries.iter().map(|e| e.score).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert!((x.score - y.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_weights_reproduce_each_method() {
        let data = make_synthetic(21, 20, 40).unwrap();
        for r in &data {
            let count = strength::rerank_by_count(r, 50).unwrap();
            let prob = strength::rerank_by_probability(r, 50).unwrap();
            let rankings = MethodRankings {
                count: count.clone(),
                prob: prob.clone(),
                coverage: list(Method::Coverage, &[("zzz", 1.0)]),
            };
            for (w, src) in [((1.0, 0.0, 0.0), &count), ((0.0, 1.0, 0.0), &prob)] {
                let w = CombinationWeights::new(w.0, w.1, w.2).unwrap();
                let full = rankings.full(w, 5).unwrap();
                let expected: Vec<&str> = src.entries.iter().take(5).map(|e| e.canonical.as_str()).collect();
                let got: Vec<&str> = full
                    .entries
                    .iter()
                    .take(expected.len())
                    .map(|e| e.canonical.as_str())
                    .collect();
                assert_eq!(got, expected);
                assert_eq!(full.method, Method::Full);
            }
        }
    }

    #[test]
    fn coverage_only_answer_is_eligible() {
        let count = renormalize_topk(&list(Method::Count, &[("x", 1.0)]), 5).unwrap();
        let prob = renormalize_topk(&list(Method::Prob, &[("x", 1.0)]), 5).unwrap();
        let cov = renormalize_topk(&list(Method::Coverage, &[("y", 2.0), ("x", 0.0)]), 5).unwrap();
        let w = CombinationWeights::new(0.1, 0.1, 0.8).unwrap();
        let out = combine(&count, &prob, &cov, w);
        assert_eq!(out.entries[0].canonical, "y");
        let sb = cov.score("y").unwrap();
        assert!((out.entries[0].score - 0.8 * sb).abs() < 1e-15);
    }

    #[test]
    fn mirrored_scores_tie_break() {
        let count = MethodScores {
            method: Method::Count,
            entries: list(Method::Count, &[("x", 0.6), ("y", 0.4)]).entries,
        };
        let prob = MethodScores {
            method: Method::Prob,
            entries: list(Method::Prob, &[("y", 0.6), ("x", 0.4)]).entries,
        };
        let cov = MethodScores {
            method: Method::Coverage,
            entries: vec![],
        };
        let out = combine(&count, &prob, &cov, CombinationWeights::default());
        // both total 1/3; both first somewhere, so canonical order decides
        assert!((out.entries[0].score - out.entries[1].score).abs() < 1e-15);
        assert_eq!(out.entries[0].canonical, "x");
        assert_eq!(out.entries[1].canonical, "y");
    }

    #[test]
    fn weights_validation() {
        assert!(CombinationWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(CombinationWeights::new(-0.1, 0.5, 0.6).is_err());
        assert!(CombinationWeights::new(f64::NAN, 0.5, 0.6).is_err());
    }

    #[test]
    fn grid_counts() {
        assert_eq!(grid_size(0.5), 6);
        assert_eq!(grid_size(1.0), 3);
        assert_eq!(grid_size(0.1), 66);
    }

    #[test]
    fn grid_prefers_perfect_count() {
        let records: Vec<QuestionRecord> = (0..6).map(|i| record(&format!("q{i}"), &format!("gold{i}"))).collect();
        let rankings: Vec<MethodRankings> = (0..6)
            .map(|i| {
                let g = format!("gold{i}");
                let junk = format!("junk{i}");
                MethodRankings {
                    count: list(Method::Count, &[(&g, 3.0), (&junk, 1.0)]),
                    prob: list(Method::Prob, &[(&junk, 0.9), (&g, 0.1)]),
                    coverage: list(Method::Coverage, &[(&junk, 0.7), (&g, 0.3)]),
                }
            })
            .collect();
        let (w, report) = grid_search_weights(&records, &rankings, 0.5, 5).unwrap();
        assert_eq!(report.em, 1.0);
        assert_eq!(w.as_array(), [1.0, 0.0, 0.0]);
        let (w, _) = grid_search_weights(&records, &rankings, 1.0, 5).unwrap();
        assert_eq!(w.as_array(), [1.0, 0.0, 0.0]);
        assert!(grid_search_weights(&[], &[], 0.5, 5).is_err());
        assert!(grid_search_weights(&records, &rankings, 0.0, 5).is_err());
        assert!(grid_search_weights(&records, &rankings, 0.3, 5).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let recs = vec![record("x", "york city"), record("y", "Paris")];
        let preds: HashMap<String, String> = [("x", "york city"), ("y", "paris")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let r = evaluate(&preds, &recs).unwrap();
        assert_eq!((r.em, r.f1, r.n), (1.0, 1.0, 2));
        assert_eq!(r.per_bucket["2"].n, 1);
        assert_eq!(r.per_bucket["1"].n, 1);

        let half: HashMap<String, String> = [("x".to_string(), "york city".to_string())].into();
        assert_eq!(evaluate(&half, &recs).unwrap().em, 0.5);

        let one = vec![record("x", "york city")];
        let p: HashMap<String, String> = [("x".to_string(), "new york city".to_string())].into();
        let r = evaluate(&p, &one).unwrap();
        assert_eq!(r.em, 0.0);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        assert!(evaluate(&p, &[]).is_err());
        let json = r.to_json();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn evaluate_permutation_invariant() {
        let recs: Vec<QuestionRecord> = make_synthetic(4, 12, 40).unwrap();
        let lists: Vec<RankedList> = recs.iter().map(|r| strength::rerank_by_count(r, 50).unwrap()).collect();
        let a = evaluate_lists(&recs, &lists).unwrap();
        let mut rr = recs.clone();
        let mut ll = lists.clone();
        rr.reverse();
        ll.reverse();
        let b = evaluate_lists(&rr, &ll).unwrap();
        assert_eq!(a.n, b.n);
        assert!((a.em - b.em).abs() < 1e-12 && (a.f1 - b.f1).abs() < 1e-12);
        assert!(a.em <= a.f1);
        assert_eq!(a.per_bucket.values().map(|b| b.n).sum::<usize>(), a.n);
    }

    #[test]
    fn recall_examples() {
        let recs = vec![record("x", "gold"), record("y", "nothing")];
        let lists = vec![
            list(Method::Base, &[("x", 3.0), ("y", 2.0), ("gold", 1.0)]),
            list(Method::Base, &[("x", 3.0)]),
        ];
        let rows = topk_recall(&recs[..1], &lists[..1], &[1, 3]).unwrap();
        assert_eq!(rows[0].em, 0.0);
        assert_eq!(rows[1].em, 1.0);
        let rows = topk_recall(&recs, &lists, &[1, 2, 3, 10]).unwrap();
        assert_eq!(rows.iter().map(|r| r.em).collect::<Vec<_>>(), vec![0.0, 0.0, 0.5, 0.5]);
        assert!(topk_recall(&recs, &lists, &[]).is_err());
        assert_eq!(recall_csv(&rows[..1]), "k,em,f1\n1,0,0\n");
        assert!(recall_table(&rows).lines().count() == 5);
    }

    #[test]
    fn recall_monotone_on_synthetic() {
        let recs = make_synthetic(8, 30, 40).unwrap();
        let lists: Vec<RankedList> = recs.iter().map(|r| strength::base_ranking(r, 50)).collect();
        let ks: Vec<usize> = (1..=10).collect();
        let rows = topk_recall(&recs, &lists, &ks).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].em >= w[0].em && w[1].f1 >= w[0].f1);
        }
    }
}
