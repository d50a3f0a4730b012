//! Held-out evaluation: recall@K in both retrieval directions.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};

use sia_core::recall::RecallReport;

use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::model::Model;
use crate::train::embed_items;

pub const EVAL_KS: [usize; 3] = [1, 5, 10];

/// Evaluate a checkpoint on one split at K in {1, 5, 10}.
pub fn evaluate(run: &RunConfig, checkpoint: &Path, split: Split) -> Result<RecallReport> {
    run.validate()?;
    let rows = dataset::scan_manifest(&run.data.manifest)?;
    let items = dataset::split_items(&rows, &run.data.cache_root, split);
    if items.is_empty() {
        bail!("no cached items in split {split}; run preprocess first");
    }
    let (mut model, _opt, _meta) = Model::load_checkpoint(checkpoint, run)?;
    let (a, i) = embed_items(&mut model, &items)?;
    Ok(RecallReport::compute(&a, &i, &EVAL_KS)?)
}

/// Plain-text table of a recall report.
pub fn format_table(report: &RecallReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("queries: {}\n", report.queries));
    out.push_str("direction  ");
    for k in &report.ks {
        out.push_str(&format!("R@{k:<6}"));
    }
    out.push('\n');
    for (name, scores) in [("s2i", &report.s2i), ("i2s", &report.i2s)] {
        out.push_str(&format!("{name:<11}"));
        for s in scores {
            out.push_str(&format!("{s:<8.4}"));
        }
        out.push('\n');
    }
    out
}

/// CSV form: `direction,k,recall`.
pub fn write_csv(report: &RecallReport, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "direction,k,recall")?;
    for (name, scores) in [("s2i", &report.s2i), ("i2s", &report.i2s)] {
        for (k, s) in report.ks.iter().zip(scores) {
            writeln!(f, "{name},{k},{s}")?;
        }
    }
    Ok(())
}
