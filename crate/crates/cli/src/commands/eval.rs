use std::collections::HashMap;

use anyhow::{bail, Result};
use evirank::combine::{evaluate, recall_csv, topk_recall, RecallRow};
use evirank::{Method, QuestionRecord};

use super::{load_records, pct, print_report};
use crate::args::EvalArgs;
use crate::manifest::write_atomic;
use crate::predictions::{self, Prediction};
use crate::usage;

/// Every record needs a prediction and every prediction a record.
fn check_ids(records: &[QuestionRecord], preds: &HashMap<String, Prediction>) -> Result<()> {
    let missing: Vec<&str> = records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !preds.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        bail!(
            "no prediction for {} question(s): {}",
            missing.len(),
            missing.join(", ")
        );
    }
    if preds.len() > records.len() {
        let known: std::collections::HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let mut extra: Vec<&str> = preds
            .keys()
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect();
        extra.sort_unstable();
        bail!("predictions for unknown question(s): {}", extra.join(", "));
    }
    Ok(())
}

fn print_recall(rows: &[RecallRow]) {
    println!("{:>5}  {:>6}  {:>6}", "k", "EM", "F1");
    for r in rows {
        println!("{:>5}  {:>6}  {:>6}", r.k, pct(r.em), pct(r.f1));
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if let Some(ks) = &a.recall {
        if ks.is_empty() || ks.contains(&0) {
            return Err(usage("--recall needs positive k values"));
        }
    }
    let records = load_records(&a.data)?;
    let preds = predictions::load(&a.predictions)?;
    check_ids(&records, &preds)?;

    let answers: HashMap<String, String> = preds
        .values()
        .filter_map(|p| p.answer.clone().map(|ans| (p.id.clone(), ans)))
        .collect();
    let report = evaluate(&answers, &records)?;
    let recall = match &a.recall {
        Some(ks) => {
            let lists: Vec<_> = records.iter().map(|r| preds[&r.id].to_list(Method::Base)).collect();
            Some(topk_recall(&records, &lists, ks)?)
        }
        None => None,
    };

    if a.json {
        let mut v = serde_json::to_value(&report)?;
        if let Some(rows) = &recall {
            v["recall"] = serde_json::to_value(rows)?;
        }
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        print_report(&report, a.breakdown);
        if let Some(rows) = &recall {
            print_recall(rows);
        }
    }
    if let (Some(rows), Some(path)) = (&recall, &a.recall_csv) {
        write_atomic(path, recall_csv(rows).as_bytes())?;
    }
    Ok(())
}
