use std::fs;

use anyhow::{Context, Result};
use evirank::corpus::{self, compute_stats, make_synthetic, synthetic_embeddings};
use evirank::coverage::{gradcheck_tiny_model, CoverageParams, ModelDims};

use super::load_records;
use crate::args::{GradcheckArgs, StatsArgs, SynthArgs};
use crate::manifest::{temp_sibling, write_atomic, RunManifest};
use crate::{usage, NumericFailure};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let sharing = a.sharing.into();
    let names = CoverageParams::names(&ModelDims {
        sharing,
        ..ModelDims::default()
    });
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.seeds {
        let report = gradcheck_tiny_model(seed, sharing, a.h)?;
        let at = match report.worst {
            Some((t, i)) => format!(
                " at {}[{i}] (analytic {:.6e}, numeric {:.6e})",
                names[t], report.worst_values.0, report.worst_values.1
            ),
            None => String::new(),
        };
        println!(
            "seed {seed}: max relative error {:.3e} over {} coordinates{at}",
            report.max_rel_error, report.checked
        );
        worst = worst.max(report.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}, h = {:e})",
        a.h
    );
    if worst > GRADCHECK_TOLERANCE {
        return Err(NumericFailure(format!(
            "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        ))
        .into());
    }
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let records = load_records(&a.data)?;
    let stats = compute_stats(&records, a.k)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let records = make_synthetic(a.seed, a.train + a.dev, a.vocab)?;
    let table = synthetic_embeddings(a.seed, a.vocab, a.dim)?;
    let mut manifest = RunManifest::start("synth", a, Some(a.seed))?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let (train, dev) = records.split_at(a.train);
    for (name, part) in [("train.jsonl", train), ("dev.jsonl", dev)] {
        let path = a.out_dir.join(name);
        write_atomic(&path, corpus::to_jsonl(part).as_bytes())?;
        manifest.output(&path);
    }
    let emb = a.out_dir.join("embeddings.txt");
    let tmp = temp_sibling(&emb);
    table.write(&tmp)?;
    fs::rename(&tmp, &emb).with_context(|| format!("renaming onto {}", emb.display()))?;
    manifest.output(&emb);
    manifest.finish(&a.out_dir.join("manifest.json"))?;
    println!(
        "wrote {} train and {} dev records, {} embeddings of dimension {} to {}",
        train.len(),
        dev.len(),
        table.len(),
        a.dim,
        a.out_dir.display()
    );
    Ok(())
}
