//! Aggregate run artifacts into table-shaped CSVs: one distribution-metric
//! table per metric (rows = model variant, columns = split x class), one
//! experiment table per (experiment, metric) with `mean (+-std)` cells, and
//! a generated-image count table.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::evalsuite::MetricRow;
use crate::harness::ExperimentReport;
use crate::sampler::SynthManifest;

pub const SPLIT_ORDER: [&str; 3] = ["dataset1+2", "dataset1", "dataset2"];
pub const CLASS_ORDER: [&str; 4] = ["class0", "class1", "class2", "all"];

fn unique_ordered(values: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Pivot metric rows into one CSV per metric name found in `rows`.
pub fn write_metric_tables(rows: &[MetricRow], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let metrics = unique_ordered(rows.iter().map(|r| r.metric.clone()));
    let mut produced = Vec::new();
    for metric in metrics {
        let sub: Vec<&MetricRow> = rows.iter().filter(|r| r.metric == metric).collect();
        let variants = unique_ordered(sub.iter().map(|r| r.model_variant.clone()));
        let path = dir.join(format!("{metric}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["variant".to_string()];
        for split in SPLIT_ORDER {
            for class in CLASS_ORDER {
                if sub.iter().any(|r| r.split == split && r.class == class) {
                    header.push(format!("{split}/{class}"));
                }
            }
        }
        w.write_record(&header)?;
        for variant in &variants {
            let mut record = vec![variant.clone()];
            for col in header.iter().skip(1) {
                let (split, class) = col.split_once('/').expect("header built above");
                let cell = sub
                    .iter()
                    .find(|r| &r.model_variant == variant && r.split == split && r.class == class)
                    .map(|r| format!("{:.6}", r.value))
                    .unwrap_or_default();
                record.push(cell);
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        produced.push(path);
    }
    Ok(produced)
}

fn cell(mean: f64, std: f64, n: usize) -> String {
    if n > 1 {
        format!("{mean:.4} (±{std:.4})")
    } else {
        format!("{mean:.4}")
    }
}

/// One table per (experiment, metric): rows = ratio/scale, columns = variant.
pub fn write_experiment_tables(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let agg = report.aggregate();
    let experiments = unique_ordered(agg.iter().map(|a| a.experiment.clone()));
    let mut produced = Vec::new();
    for experiment in experiments {
        let sub: Vec<_> = agg.iter().filter(|a| a.experiment == experiment).collect();
        let variants = unique_ordered(sub.iter().map(|a| a.variant.clone()));
        let mut levels: Vec<u32> = Vec::new();
        for a in &sub {
            if !levels.contains(&a.ratio_or_scale) {
                levels.push(a.ratio_or_scale);
            }
        }
        levels.sort_unstable();
        for (metric, pick, pick_std) in [
            ("f1", (|a: &&crate::harness::AggRow| a.f1_mean) as fn(&&crate::harness::AggRow) -> f64, (|a: &&crate::harness::AggRow| a.f1_std) as fn(&&crate::harness::AggRow) -> f64),
            ("auc", |a| a.auc_mean, |a| a.auc_std),
        ] {
            let path = dir.join(format!("{experiment}_{metric}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["percent".to_string()];
            header.extend(variants.iter().cloned());
            w.write_record(&header)?;
            for level in &levels {
                let mut record = vec![level.to_string()];
                for variant in &variants {
                    let found = sub
                        .iter()
                        .find(|a| &a.variant == variant && a.ratio_or_scale == *level);
                    record.push(match found {
                        Some(a) => cell(pick(a), pick_std(a), a.n_runs),
                        None => String::new(),
                    });
                }
                w.write_record(&record)?;
            }
            w.flush()?;
            produced.push(path);
        }
    }
    Ok(produced)
}

/// Per-class generated-image counts, one column per variant.
pub fn write_counts_table(
    manifests: &[(String, &SynthManifest)],
    path: &Path,
) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let variants = unique_ordered(manifests.iter().map(|(v, _)| v.clone()));
    let mut classes = Vec::new();
    for (_, m) in manifests {
        for c in m.classes() {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class".to_string()];
    header.extend(variants.iter().cloned());
    w.write_record(&header)?;
    for class in &classes {
        let mut record = vec![class.clone()];
        for variant in &variants {
            let count: usize = manifests
                .iter()
                .filter(|(v, _)| v == variant)
                .map(|(_, m)| m.records.iter().filter(|r| &r.class == class).count())
                .sum();
            record.push(count.to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}
