//! Deterministic report assembly: long-format metric tables, OOD
//! summaries, and reliability CSVs. Floats are formatted with Rust's
//! shortest-roundtrip notation, so identical values always serialize to
//! identical bytes. Timestamps never appear here; they belong in the
//! run metadata file.

use serde::{Deserialize, Serialize};

use crate::baselines::CalibratorModel;
use crate::dataset::{CalibrationDataset, LabelVector};
use crate::error::{DacError, Result};
use crate::knn::KnnIndex;
use crate::metrics::{
    aupr, auroc, brier, classwise_ece, detection_error, ece_equal_mass, ece_equal_width,
    fpr_at_tpr, macro_average, nll, reliability_data, AuprPositive, BinStats, BinningScheme,
    OodScores,
};
use crate::tensor::DenseMatrix;

/// One `split x metric` cell of the evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Metric names in the fixed emission order.
pub const METRIC_NAMES: [&str; 6] = [
    "accuracy",
    "ece_equal_width",
    "ece_equal_mass",
    "classwise_ece",
    "brier",
    "nll",
];

fn accuracy(probs: &DenseMatrix, labels: &LabelVector) -> f64 {
    let n = probs.rows();
    let correct = (0..n)
        .filter(|&r| probs.row_argmax(r) == labels.get(r) as usize)
        .count();
    correct as f64 / n as f64
}

/// All scalar calibration metrics of one probability matrix, in
/// [`METRIC_NAMES`] order.
pub fn split_metrics(
    probs: &DenseMatrix,
    labels: &LabelVector,
    bins: usize,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(METRIC_NAMES.len());
    out.push(("accuracy".to_string(), accuracy(probs, labels)));
    out.push((
        "ece_equal_width".to_string(),
        ece_equal_width(probs, labels, bins)?.0,
    ));
    out.push((
        "ece_equal_mass".to_string(),
        ece_equal_mass(probs, labels, bins)?.0,
    ));
    out.push((
        "classwise_ece".to_string(),
        classwise_ece(probs, labels, bins)?.0,
    ));
    out.push(("brier".to_string(), brier(probs, labels)?));
    out.push(("nll".to_string(), nll(probs, labels)?));
    Ok(out)
}

/// Evaluates a fitted calibrator over the named (labeled) splits:
/// per-split metric rows, macro-average rows across the splits, and a
/// reliability table per split (equal-mass binning).
pub fn evaluate_model(
    model: &CalibratorModel,
    splits: &[CalibrationDataset],
    indices: Option<&[KnnIndex]>,
    bins: usize,
) -> Result<(Vec<EvalRow>, Vec<(String, BinStats)>)> {
    if splits.is_empty() {
        return Err(DacError::Config("no splits to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut reliability = Vec::new();
    let mut per_metric: Vec<Vec<f64>> = vec![Vec::new(); METRIC_NAMES.len()];
    for split in splits {
        let labels = split.labels.as_ref().ok_or_else(|| {
            DacError::Config(format!("split {} has no labels", split.split_name))
        })?;
        let probs = model.apply(split, indices)?;
        for (i, (metric, value)) in split_metrics(&probs, labels, bins)?.into_iter().enumerate()
        {
            per_metric[i].push(value);
            rows.push(EvalRow {
                split: split.split_name.clone(),
                metric,
                value,
            });
        }
        reliability.push((
            split.split_name.clone(),
            reliability_data(&probs, labels, bins, BinningScheme::EqualMass)?,
        ));
    }
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        rows.push(EvalRow {
            split: "macro".to_string(),
            metric: name.to_string(),
            value: macro_average(&per_metric[i])?,
        });
    }
    Ok((rows, reliability))
}

pub fn eval_rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("split,metric,value\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.split, row.metric, row.value));
    }
    out
}

pub fn reliability_to_csv(stats: &BinStats) -> String {
    let mut out = String::from("bin,lower,upper,count,mean_confidence,accuracy\n");
    for (i, b) in stats.bins.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
        ));
    }
    out
}

/// Five-number summary of a score sample (boxplot data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn summarize(scores: &[f64]) -> ScoreSummary {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    ScoreSummary {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    }
}

/// The full OOD battery on top-class confidences plus in/out summary
/// statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub in_summary: ScoreSummary,
    pub out_summary: ScoreSummary,
}

pub fn ood_report(scores: &OodScores) -> Result<OodReport> {
    Ok(OodReport {
        fpr_at_95_tpr: fpr_at_tpr(scores, 0.95)?,
        detection_error: detection_error(scores),
        auroc: auroc(scores),
        aupr_in: aupr(scores, AuprPositive::In),
        aupr_out: aupr(scores, AuprPositive::Out),
        in_summary: summarize(&scores.in_scores),
        out_summary: summarize(&scores.out_scores),
    })
}

pub fn ood_report_to_csv(report: &OodReport) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("fpr_at_95_tpr,{}\n", report.fpr_at_95_tpr));
    out.push_str(&format!("detection_error,{}\n", report.detection_error));
    out.push_str(&format!("auroc,{}\n", report.auroc));
    out.push_str(&format!("aupr_in,{}\n", report.aupr_in));
    out.push_str(&format!("aupr_out,{}\n", report.aupr_out));
    out
}
