use std::fs;
use std::sync::Arc;

use anyhow::{Context, Result};
use evirank::coverage::{self, history_csv, save_checkpoint, CoverageModel, TrainConfig};
use evirank::textnorm::load_embeddings;

use super::{load_records, pct};
use crate::args::TrainArgs;
use crate::manifest::{write_atomic, RunManifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        k: a.k,
        lr: a.lr,
        dropout: a.dropout,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        max_union_len: a.max_union_len,
        max_q_len: a.max_q_len,
        max_a_len: a.max_a_len,
        l: a.l,
        d: a.d,
        sharing: a.sharing.into(),
        gold_prob_floor: a.gold_prob_floor,
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = config(a);
    config.validate()?;
    let mut manifest = RunManifest::start("train", a, Some(a.seed))?;
    manifest.input(&a.train)?;
    manifest.input(&a.dev)?;
    if let Some(e) = &a.embeddings {
        manifest.input(e)?;
    }

    let train_set = load_records(&a.train)?;
    let dev_set = load_records(&a.dev)?;
    let table = load_embeddings(a.embeddings.as_deref(), a.d)?;
    if table.is_empty() {
        eprintln!("warning: no embeddings given, every token embeds as zeros");
    }
    let model = CoverageModel::new(config.dims(), Arc::new(table), config.seed)?;
    let outcome = coverage::train(&model, &train_set, &dev_set, &config)?;

    for h in &outcome.history {
        eprintln!(
            "epoch {:>3}  loss {:.6}  dev EM {}  F1 {}",
            h.epoch,
            h.train_loss,
            pct(h.dev_em),
            pct(h.dev_f1)
        );
    }
    if outcome.skipped > 0 {
        eprintln!(
            "skipped {} training records with no positive candidate",
            outcome.skipped
        );
    }

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let checkpoint = a.out_dir.join(CHECKPOINT_FILE);
    let history = a.out_dir.join(HISTORY_FILE);
    save_checkpoint(&outcome.model, &checkpoint)?;
    write_atomic(&history, history_csv(&outcome.history).as_bytes())?;
    manifest.output(&checkpoint);
    manifest.output(&history);
    manifest
        .results
        .insert("best_epoch".into(), serde_json::Value::from(outcome.best_epoch));
    manifest.finish(&a.out_dir.join(MANIFEST_FILE))?;

    match outcome.history.iter().find(|h| h.epoch == outcome.best_epoch) {
        Some(best) => println!(
            "best epoch {}: dev EM {}  F1 {}",
            best.epoch,
            pct(best.dev_em),
            pct(best.dev_f1)
        ),
        None => println!("no training epochs run; saved the initial parameters"),
    }
    Ok(())
}
