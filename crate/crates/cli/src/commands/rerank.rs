use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use evirank::bm25::{self, Bm25Params};
use evirank::combine::{evaluate_lists, grid_search_weights, CombinationWeights, MethodRankings};
use evirank::strength::{rerank_by_count, rerank_by_probability};
use evirank::{CoverageModel, QuestionRecord, RankedList};
use rayon::prelude::*;

use super::{load_model, load_records, pct, print_report};
use crate::args::{MethodArg, RerankArgs};
use crate::manifest::{write_atomic, RunManifest};
use crate::predictions::{self, Prediction};
use crate::usage;

pub fn manifest_path(out: &Path) -> PathBuf {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("predictions");
    out.with_file_name(format!("{name}.manifest.json"))
}

fn parse_weights(text: &str) -> Result<CombinationWeights> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--weights expects three numbers, got `{text}`")))?;
    let [c, p, v] = parts[..] else {
        return Err(usage(format!("--weights expects three numbers, got `{text}`")));
    };
    Ok(CombinationWeights::new(c, p, v)?)
}

fn method_rankings(
    records: &[QuestionRecord],
    model: &CoverageModel,
    strength_k: usize,
    k: usize,
) -> Result<Vec<MethodRankings>> {
    records
        .par_iter()
        .map(|r| {
            Ok(MethodRankings {
                count: rerank_by_count(r, strength_k)?,
                prob: rerank_by_probability(r, strength_k)?,
                coverage: model.rank_candidates(r, k)?.1,
            })
        })
        .collect()
}

pub fn rerank(a: &RerankArgs) -> Result<()> {
    let k = a.k.unwrap_or(a.method.default_k());
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if a.method.needs_model() && a.model.is_none() {
        return Err(usage(format!("--method {} requires --model", a.method.method())));
    }
    if a.method != MethodArg::Full && (a.weights.is_some() || a.grid_step.is_some()) {
        return Err(usage("--weights and --grid-step only apply to --method full"));
    }

    let mut manifest = RunManifest::start("rerank", a, None)?;
    manifest.input(&a.data)?;
    let records = load_records(&a.data)?;
    let model = match &a.model {
        Some(path) => {
            manifest.input(path)?;
            if let Some(e) = &a.embeddings {
                manifest.input(e)?;
            }
            Some(load_model(path, a.embeddings.as_deref()).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };

    let lists: Vec<RankedList> = match (a.method, &model) {
        (MethodArg::Count, _) => records
            .iter()
            .map(|r| rerank_by_count(r, k))
            .collect::<Result<_, _>>()?,
        (MethodArg::Prob, _) => records
            .iter()
            .map(|r| rerank_by_probability(r, k))
            .collect::<Result<_, _>>()?,
        (MethodArg::Bm25, _) => bm25::rerank_all(&records, a.idf.into(), Bm25Params::new(a.k1, a.b)?, k)?,
        (MethodArg::Coverage, Some(m)) => records
            .par_iter()
            .map(|r| Ok(m.rank_candidates(r, k)?.1))
            .collect::<Result<_>>()?,
        (MethodArg::Full, Some(m)) => {
            let weights = match (&a.weights, a.grid_step, &a.dev) {
                (Some(w), _, _) => parse_weights(w)?,
                (None, Some(step), Some(dev_path)) => {
                    manifest.input(dev_path)?;
                    let dev = load_records(dev_path)?;
                    let rankings = method_rankings(&dev, m, a.strength_k, k)?;
                    let (w, report) = grid_search_weights(&dev, &rankings, step, k)?;
                    eprintln!(
                        "grid search: weights {},{},{} (dev EM {}, F1 {})",
                        w.w_count,
                        w.w_prob,
                        w.w_cov,
                        pct(report.em),
                        pct(report.f1)
                    );
                    w
                }
                _ => CombinationWeights::default(),
            };
            manifest
                .results
                .insert("resolved_weights".into(), serde_json::to_value(weights.as_array())?);
            method_rankings(&records, m, a.strength_k, k)?
                .iter()
                .map(|r| r.full(weights, k))
                .collect::<Result<_, _>>()?
        }
        (MethodArg::Coverage | MethodArg::Full, None) => unreachable!("checked above"),
    };

    let preds: Vec<Prediction> = records
        .iter()
        .zip(&lists)
        .map(|(r, l)| Prediction::from_list(&r.id, l))
        .collect();
    write_atomic(&a.out, predictions::to_jsonl(&preds).as_bytes())?;
    manifest.output(&a.out);
    manifest.finish(&manifest_path(&a.out))?;
    eprintln!("wrote {} predictions to {}", preds.len(), a.out.display());

    if records.iter().any(|r| !r.gold_answers.is_empty()) {
        print_report(&evaluate_lists(&records, &lists)?, false);
    }
    Ok(())
}
