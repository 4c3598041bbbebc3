//! The `report` subcommand: evaluates trained checkpoints across every
//! available split and writes comparison tables — `summary.csv` (both models
//! by split), `ap_delta.csv` (per-class AP difference on the correlated test
//! split), `gate_weights.csv` (per-image, per-class expert mixing weights),
//! and `probe_fpr.csv` (false-positive rate for each probe's removed class).

use std::path::{Path, PathBuf};

use clap::Args;
use mlvpt_core::datagen::{load_dataset, Dataset};
use mlvpt_core::error::{Error, Result};
use mlvpt_core::labelgraph::AffinityMode;
use mlvpt_core::metrics::EvalResult;
use mlvpt_core::model::Model;
use mlvpt_core::trainer::evaluate_model;
use mlvpt_core::checkpoint;

#[derive(Args)]
pub struct ReportArgs {
    /// Training output directory of the grouped model
    #[arg(long)]
    mlvpt_dir: PathBuf,
    /// Training output directory of the plain-VPT baseline
    #[arg(long)]
    vanilla_dir: PathBuf,
    /// Data directory holding the split manifests
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// How many test images to dump gate weights for
    #[arg(long, default_value_t = 8)]
    gate_images: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

struct BestRow {
    best_epoch: usize,
    best_val_map: f64,
}

fn best_from_history(dir: &Path) -> Result<BestRow> {
    let path = dir.join("history.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|_| Error::DataFormat {
        path: path.display().to_string(),
        reason: "history.csv missing (run train first)".into(),
    })?;
    let mut best = BestRow {
        best_epoch: 0,
        best_val_map: f64::NEG_INFINITY,
    };
    for record in reader.records() {
        let record = record?;
        let epoch: usize = record[0].parse().map_err(|_| Error::DataFormat {
            path: path.display().to_string(),
            reason: format!("bad epoch cell '{}'", &record[0]),
        })?;
        let val_map: f64 = record[3].parse().map_err(|_| Error::DataFormat {
            path: path.display().to_string(),
            reason: format!("bad val_mAP cell '{}'", &record[3]),
        })?;
        if val_map > best.best_val_map {
            best = BestRow {
                best_epoch: epoch,
                best_val_map: val_map,
            };
        }
    }
    if best.best_val_map.is_infinite() {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            reason: "history.csv has no rows".into(),
        });
    }
    Ok(best)
}

/// Splits present in the data directory: `test` always, `decorrelated` and
/// any `probe_i_j` when generated.
fn discover_splits(data: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut splits = Vec::new();
    let test = data.join("test.manifest.json");
    if !test.exists() {
        return Err(Error::DataFormat {
            path: test.display().to_string(),
            reason: "test manifest missing".into(),
        });
    }
    splits.push(("test".to_string(), test));
    let deco = data.join("decorrelated.manifest.json");
    if deco.exists() {
        splits.push(("decorrelated".to_string(), deco));
    }
    let mut probes = Vec::new();
    for entry in std::fs::read_dir(data)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("probe_") && name.ends_with(".manifest.json") {
            let split = name.trim_end_matches(".manifest.json").to_string();
            probes.push((split, entry.path()));
        }
    }
    probes.sort();
    splits.extend(probes);
    Ok(splits)
}

fn probe_removed_class(split: &str) -> Option<usize> {
    let mut parts = split.strip_prefix("probe_")?.split('_');
    let _present: usize = parts.next()?.parse().ok()?;
    let removed: usize = parts.next()?.parse().ok()?;
    Some(removed)
}

/// Fraction of split images whose averaged prediction for `class` clears the
/// threshold.
fn false_positive_rate(model: &Model, ds: &Dataset, class: usize, threshold: f64) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..ds.len() {
        let pred = model.predict(ds.image(i))?;
        if pred.combined[class] >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    let (ml_model, _) = checkpoint::load_model(&args.mlvpt_dir.join("best.ckpt"))?;
    let (va_model, _) = checkpoint::load_model(&args.vanilla_dir.join("best.ckpt"))?;
    let ml_best = best_from_history(&args.mlvpt_dir)?;
    let va_best = best_from_history(&args.vanilla_dir)?;
    let splits = discover_splits(&args.data)?;

    std::fs::create_dir_all(&args.out)?;
    let mut summary = csv::Writer::from_path(args.out.join("summary.csv"))?;
    summary.write_record([
        "model", "split", "mAP", "CP", "CR", "CF1", "OP", "OR", "OF1", "best_epoch",
        "best_val_mAP",
    ])?;

    let mut probe_rows: Vec<(String, String, usize, f64)> = Vec::new();
    let mut test_results: Vec<(String, EvalResult)> = Vec::new();

    for (model_name, model, best) in [
        ("ml_vpt", &ml_model, &ml_best),
        ("vanilla_vpt", &va_model, &va_best),
    ] {
        for (split_name, manifest) in &splits {
            let ds = load_dataset(manifest)?;
            let result = evaluate_model(model, &ds, args.threshold)?;
            summary.write_record([
                model_name.to_string(),
                split_name.clone(),
                format!("{:.10e}", result.map),
                format!("{:.10e}", result.per_class_precision),
                format!("{:.10e}", result.per_class_recall),
                format!("{:.10e}", result.per_class_f1),
                format!("{:.10e}", result.overall_precision),
                format!("{:.10e}", result.overall_recall),
                format!("{:.10e}", result.overall_f1),
                best.best_epoch.to_string(),
                format!("{:.10e}", best.best_val_map),
            ])?;
            if let Some(removed) = probe_removed_class(split_name) {
                let fpr = false_positive_rate(model, &ds, removed, args.threshold)?;
                probe_rows.push((model_name.to_string(), split_name.clone(), removed, fpr));
            }
            if split_name == "test" {
                test_results.push((model_name.to_string(), result));
            }
        }
    }
    summary.flush()?;

    // Per-class AP delta on the correlated test split.
    let ml_test = &test_results.iter().find(|(n, _)| n == "ml_vpt").unwrap().1;
    let va_test = &test_results.iter().find(|(n, _)| n == "vanilla_vpt").unwrap().1;
    let mut delta = csv::Writer::from_path(args.out.join("ap_delta.csv"))?;
    delta.write_record(["class", "ap_ml_vpt", "ap_vanilla_vpt", "delta"])?;
    for (c, (ml, va)) in ml_test
        .per_class_ap
        .iter()
        .zip(va_test.per_class_ap.iter())
        .enumerate()
    {
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
        let d = match (ml, va) {
            (Some(a), Some(b)) => format!("{:.10e}", a - b),
            _ => String::new(),
        };
        delta.write_record([c.to_string(), fmt(ml), fmt(va), d])?;
    }
    delta.flush()?;

    if !probe_rows.is_empty() {
        let mut w = csv::Writer::from_path(args.out.join("probe_fpr.csv"))?;
        w.write_record(["model", "split", "removed_class", "fpr"])?;
        for (model, split, class, fpr) in &probe_rows {
            w.write_record([
                model.clone(),
                split.clone(),
                class.to_string(),
                format!("{fpr:.10e}"),
            ])?;
        }
        w.flush()?;
    }

    write_gate_weights(&ml_model, &splits[0].1, args.gate_images, &args.out)?;
    println!("report written to {}", args.out.display());
    Ok(())
}

/// Per-image, per-class softmax weights over each group's expert slots
/// (grouped model only).
fn write_gate_weights(model: &Model, test_manifest: &Path, n_images: usize, out: &Path) -> Result<()> {
    let Model::MlVpt(m) = model else {
        return Ok(());
    };
    let ds = load_dataset(test_manifest)?;
    let n = n_images.min(ds.len());
    let n_slots = m.cfg.n_slots;

    let mut w = csv::Writer::from_path(out.join("gate_weights.csv"))?;
    let mut header = vec!["image_id".to_string(), "mode".to_string(), "class".to_string()];
    header.extend((0..n_slots).map(|e| format!("w_{}", e + 1)));
    w.write_record(&header)?;

    for i in 0..n {
        let fwd = m.forward(ds.image(i))?;
        for mode in [AffinityMode::Co, AffinityMode::Dc] {
            for class in 0..m.n_classes() {
                let weights = fwd.gate_weights(mode, class);
                let mut row = vec![i.to_string(), mode.name().to_string(), class.to_string()];
                row.extend(weights.iter().map(|v| format!("{v:.6e}")));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
