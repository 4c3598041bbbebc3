//! Multi-label evaluation: mAP plus the thresholded precision/recall/F1
//! family in both pooled (overall) and per-class-averaged form.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholded confusion metrics. Overall variants pool counts across
/// classes; per-class variants average the per-class ratios, with
/// zero-denominator classes contributing 0 (and still counted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    #[serde(rename = "OP")]
    pub overall_precision: f64,
    #[serde(rename = "OR")]
    pub overall_recall: f64,
    #[serde(rename = "OF1")]
    pub overall_f1: f64,
    #[serde(rename = "CP")]
    pub per_class_precision: f64,
    #[serde(rename = "CR")]
    pub per_class_recall: f64,
    #[serde(rename = "CF1")]
    pub per_class_f1: f64,
    pub threshold: f64,
}

/// Ranking metrics. `per_class_ap` is `None` for classes with no positive
/// example; those classes are excluded from the mean and listed separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub classes_without_positives: Vec<usize>,
}

/// Everything the `eval` pipeline reports for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CP")]
    pub per_class_precision: f64,
    #[serde(rename = "CR")]
    pub per_class_recall: f64,
    #[serde(rename = "CF1")]
    pub per_class_f1: f64,
    #[serde(rename = "OP")]
    pub overall_precision: f64,
    #[serde(rename = "OR")]
    pub overall_recall: f64,
    #[serde(rename = "OF1")]
    pub overall_f1: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub classes_without_positives: Vec<usize>,
    pub threshold: f64,
}

fn check_shapes(scores: &Array2<f64>, labels: &Array2<u8>) -> Result<()> {
    if scores.dim() != labels.dim() {
        return Err(Error::ShapeMismatch {
            context: "metrics scores vs labels",
            expected: vec![labels.nrows(), labels.ncols()],
            actual: vec![scores.nrows(), scores.ncols()],
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidConfig("metrics need at least one example".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "evaluation scores".into(),
        });
    }
    Ok(())
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Confusion-count metrics at a fixed threshold; predictions are
/// `score >= threshold`.
pub fn threshold_metrics(
    scores: &Array2<f64>,
    labels: &Array2<u8>,
    threshold: f64,
) -> Result<ThresholdMetrics> {
    check_shapes(scores, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (n, k) = scores.dim();
    let mut tp = vec![0u64; k];
    let mut fp = vec![0u64; k];
    let mut fn_ = vec![0u64; k];
    for i in 0..n {
        for c in 0..k {
            let predicted = scores[[i, c]] >= threshold;
            let actual = labels[[i, c]] == 1;
            match (predicted, actual) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }

    let tp_sum: u64 = tp.iter().sum();
    let fp_sum: u64 = fp.iter().sum();
    let fn_sum: u64 = fn_.iter().sum();
    let op = ratio(tp_sum as f64, (tp_sum + fp_sum) as f64);
    let or = ratio(tp_sum as f64, (tp_sum + fn_sum) as f64);

    let mut cp = 0.0;
    let mut cr = 0.0;
    for c in 0..k {
        cp += ratio(tp[c] as f64, (tp[c] + fp[c]) as f64);
        cr += ratio(tp[c] as f64, (tp[c] + fn_[c]) as f64);
    }
    cp /= k as f64;
    cr /= k as f64;

    Ok(ThresholdMetrics {
        overall_precision: op,
        overall_recall: or,
        overall_f1: f1(op, or),
        per_class_precision: cp,
        per_class_recall: cr,
        per_class_f1: f1(cp, cr),
        threshold,
    })
}

/// Non-interpolated average precision per class, ranked by descending score
/// with ties broken toward the lower example index. Classes without a
/// positive example are excluded from the mean; if no class has one, the
/// metric is undefined and an error is returned.
pub fn mean_average_precision(scores: &Array2<f64>, labels: &Array2<u8>) -> Result<MapResult> {
    check_shapes(scores, labels)?;
    let (n, k) = scores.dim();
    let mut per_class_ap = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;

    for c in 0..k {
        let n_pos = (0..n).filter(|&i| labels[[i, c]] == 1).count();
        if n_pos == 0 {
            per_class_ap.push(None);
            skipped.push(c);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[[b, c]]
                .partial_cmp(&scores[[a, c]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut hits = 0u64;
        let mut precision_sum = 0.0;
        for (rank0, &idx) in order.iter().enumerate() {
            if labels[[idx, c]] == 1 {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        let ap = precision_sum / n_pos as f64;
        per_class_ap.push(Some(ap));
        sum += ap;
        counted += 1;
    }

    if counted == 0 {
        return Err(Error::NoPositives);
    }
    Ok(MapResult {
        map: sum / counted as f64,
        per_class_ap,
        classes_without_positives: skipped,
    })
}

/// Threshold metrics plus mAP in one report.
pub fn evaluate(scores: &Array2<f64>, labels: &Array2<u8>, threshold: f64) -> Result<EvalResult> {
    let tm = threshold_metrics(scores, labels, threshold)?;
    let ap = mean_average_precision(scores, labels)?;
    Ok(EvalResult {
        map: ap.map,
        per_class_precision: tm.per_class_precision,
        per_class_recall: tm.per_class_recall,
        per_class_f1: tm.per_class_f1,
        overall_precision: tm.overall_precision,
        overall_recall: tm.overall_recall,
        overall_f1: tm.overall_f1,
        per_class_ap: ap.per_class_ap,
        classes_without_positives: ap.classes_without_positives,
        threshold,
    })
}
