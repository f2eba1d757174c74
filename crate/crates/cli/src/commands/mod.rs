mod eval;
mod rerank;
mod tools;
mod train;

use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use evirank::combine::EvalReport;
use evirank::corpus;
use evirank::coverage::{load_checkpoint, peek_checkpoint, CoverageModel};
use evirank::textnorm::load_embeddings;
use evirank::QuestionRecord;

pub use eval::eval;
pub use rerank::rerank;
pub use tools::{gradcheck, stats, synth};
pub use train::train;

fn load_records(path: &Path) -> Result<Vec<QuestionRecord>> {
    corpus::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

/// Loads a checkpoint with the embedding table it names by hash.
fn load_model(checkpoint: &Path, embeddings: Option<&Path>) -> Result<CoverageModel> {
    let header = peek_checkpoint(checkpoint)?;
    let table = load_embeddings(embeddings, header.d)?;
    Ok(load_checkpoint(checkpoint, Arc::new(table))?)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn print_report(report: &EvalReport, breakdown: bool) {
    println!("EM {}  F1 {}  (n = {})", pct(report.em), pct(report.f1), report.n);
    if breakdown {
        println!("{:>8}  {:>6}  {:>6}  {:>6}", "length", "EM", "F1", "n");
        for (bucket, s) in &report.per_bucket {
            println!("{:>8}  {:>6}  {:>6}  {:>6}", bucket, pct(s.em), pct(s.f1), s.n);
        }
    }
}
