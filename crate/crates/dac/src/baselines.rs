//! In-domain post-hoc calibrators and their composition with the
//! density-aware scaler.
//!
//! Temperature scaling fits a single divisor by NLL; ensemble
//! temperature scaling mixes the tempered softmax with the raw softmax
//! and the uniform distribution on the simplex; IRM fits one shared
//! monotone map over pooled (probability, indicator) pairs by
//! pool-adjacent-violators, which preserves per-row ranking and hence
//! accuracy; IR fits one map per class (one-vs-all) and is NOT accuracy
//! preserving.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, LabelVector};
use crate::error::{DacError, Result};
use crate::knn::{density_profile, KnnIndex};
use crate::ops::{softmax_row_f64, softmax_rows};
use crate::opt::{golden_section, solve_simplex_qp3};
use crate::scaler::{fit_dac, rescale_logits, DacModel, FitReport};
use crate::tensor::DenseMatrix;

const TEMP_MIN: f64 = 1e-3;
const TEMP_MAX: f64 = 1e3;
/// Probability floor applied before row renormalization in the isotonic
/// calibrators.
const PROB_FLOOR: f64 = 1e-6;

/// Single scalar temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TempScaler {
    pub temperature: f64,
}

/// Temperature plus simplex mixture weights over (tempered softmax, raw
/// softmax, uniform).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtsModel {
    pub temperature: f64,
    pub mix_weights: [f64; 3],
}

/// Non-decreasing step function on [0, 1]: `values[i]` applies from
/// `breakpoints[i]` up to the next breakpoint; queries below the lowest
/// breakpoint take the lowest value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsotonicMap {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

/// One isotonic map per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OvaIsotonic {
    pub maps: Vec<IsotonicMap>,
}

fn check_finite(logits: &DenseMatrix) -> Result<()> {
    if !logits.all_finite() {
        return Err(DacError::Data("non-finite logit entry".into()));
    }
    Ok(())
}

fn mean_nll(logits: &DenseMatrix, labels: &LabelVector, temperature: f64) -> f64 {
    let n = logits.rows();
    let mut acc = 0.0f64;
    for r in 0..n {
        let p = crate::ops::softmax_scaled_row_f64(logits.row(r), temperature);
        acc += -(p[labels.get(r) as usize].max(1e-300)).ln();
    }
    acc / n as f64
}

/// Fits T by minimizing mean NLL of softmax(z/T); golden-section over
/// log T in [-3 ln 10, 3 ln 10] to |d ln T| < 1e-6.
pub fn fit_ts(logits: &DenseMatrix, labels: &LabelVector) -> Result<TempScaler> {
    check_finite(logits)?;
    if logits.rows() < 2 {
        return Err(DacError::Config("fit_ts requires at least 2 samples".into()));
    }
    if labels.len() != logits.rows() {
        return Err(DacError::Shape("label/logit row mismatch".into()));
    }
    let span = 3.0 * std::f64::consts::LN_10;
    let lnt = golden_section(|t| mean_nll(logits, labels, t.exp()), -span, span, 1e-6);
    let temperature = lnt.exp().clamp(TEMP_MIN, TEMP_MAX);
    Ok(TempScaler { temperature })
}

/// Softmax of z/T.
pub fn apply_ts(model: &TempScaler, logits: &DenseMatrix) -> DenseMatrix {
    let n = logits.rows();
    let c = logits.cols();
    let mut out = DenseMatrix::zeros(n, c);
    for r in 0..n {
        let p = crate::ops::softmax_scaled_row_f64(logits.row(r), model.temperature);
        for (ci, v) in p.into_iter().enumerate() {
            out.set(r, ci, v as f32);
        }
    }
    out
}

/// Fits the ETS mixture: T comes from [`fit_ts`], then the three
/// mixture weights minimize the squared error against one-hot labels
/// over the simplex. The weight problem is a tiny quadratic program and
/// is solved exactly by support enumeration; first-order iterations
/// stall when the tempered component collapses onto the uniform one.
pub fn fit_ets(logits: &DenseMatrix, labels: &LabelVector) -> Result<EtsModel> {
    let ts = fit_ts(logits, labels)?;
    let n = logits.rows();
    let c = logits.cols();
    let uniform = 1.0 / c as f64;

    // objective is quadratic in the 3 weights; accumulate its Gram form
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for r in 0..n {
        let p1 = crate::ops::softmax_scaled_row_f64(logits.row(r), ts.temperature);
        let p2 = softmax_row_f64(logits.row(r));
        let y = labels.get(r) as usize;
        for ci in 0..c {
            let comp = [p1[ci], p2[ci], uniform];
            let target = if ci == y { 1.0 } else { 0.0 };
            for j in 0..3 {
                for k in 0..3 {
                    a[j][k] += comp[j] * comp[k];
                }
                b[j] += comp[j] * target;
            }
        }
    }

    let w = solve_simplex_qp3(&a, &b);
    Ok(EtsModel {
        temperature: ts.temperature,
        mix_weights: w,
    })
}

/// Convex mixture of tempered softmax, raw softmax, and uniform.
pub fn apply_ets(model: &EtsModel, logits: &DenseMatrix) -> DenseMatrix {
    let n = logits.rows();
    let c = logits.cols();
    let uniform = 1.0 / c as f64;
    let [w1, w2, w3] = model.mix_weights;
    let mut out = DenseMatrix::zeros(n, c);
    for r in 0..n {
        let p1 = crate::ops::softmax_scaled_row_f64(logits.row(r), model.temperature);
        let p2 = softmax_row_f64(logits.row(r));
        for ci in 0..c {
            out.set(r, ci, (w1 * p1[ci] + w2 * p2[ci] + w3 * uniform) as f32);
        }
    }
    out
}

/// Weighted pool-adjacent-violators over a sequence sorted by x with
/// strictly increasing x (ties merged beforehand). Returns the fitted
/// non-decreasing values.
pub fn pav(values: &[f64], weights: &[f64]) -> Vec<f64> {
    #[derive(Clone, Copy)]
    struct Block {
        mean: f64,
        weight: f64,
        len: usize,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push(Block { mean: v, weight: w, len: 1 });
        while blocks.len() >= 2 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.mean <= last.mean {
                break;
            }
            let weight = prev.weight + last.weight;
            let mean = (prev.mean * prev.weight + last.mean * last.weight) / weight;
            let len = prev.len + last.len;
            blocks.truncate(blocks.len() - 2);
            blocks.push(Block { mean, weight, len });
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for b in blocks {
        out.extend(std::iter::repeat(b.mean).take(b.len));
    }
    out
}

/// Merges tied x values into (x, mean y, weight) triples, sorted by x
/// (tied pairs secondary-sorted by y first, which does not affect the
/// merged means).
fn pool_pairs(mut pairs: Vec<(f64, f64)>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for (x, y) in pairs {
        if xs.last() == Some(&x) {
            let last = xs.len() - 1;
            let w: f64 = ws[last];
            ys[last] = (ys[last] * w + y) / (w + 1.0);
            ws[last] = w + 1.0;
        } else {
            xs.push(x);
            ys.push(y);
            ws.push(1.0);
        }
    }
    (xs, ys, ws)
}

fn fit_isotonic(pairs: Vec<(f64, f64)>) -> Result<IsotonicMap> {
    if pairs.is_empty() {
        return Err(DacError::Config("isotonic fit on empty input".into()));
    }
    let (xs, ys, ws) = pool_pairs(pairs);
    let fitted = pav(&ys, &ws);
    Ok(IsotonicMap {
        breakpoints: xs,
        values: fitted,
    })
}

impl IsotonicMap {
    /// Piecewise-constant evaluation: value of the nearest breakpoint at
    /// or below the query; queries below the lowest breakpoint take the
    /// lowest value.
    pub fn eval(&self, x: f64) -> f64 {
        let pos = self.breakpoints.partition_point(|&b| b <= x);
        if pos == 0 {
            self.values[0]
        } else {
            self.values[pos - 1]
        }
    }
}

/// Fits the accuracy-preserving multiclass isotonic map: all
/// (probability, one-hot indicator) pairs across samples and classes
/// feed one shared PAV fit. Because a single non-decreasing map is
/// applied everywhere, per-row ranking and hence accuracy survive.
pub fn fit_irm(probs: &DenseMatrix, labels: &LabelVector) -> Result<IsotonicMap> {
    if probs.rows() == 0 {
        return Err(DacError::Config("fit_irm on empty input".into()));
    }
    let mut pairs = Vec::with_capacity(probs.rows() * probs.cols());
    for r in 0..probs.rows() {
        let y = labels.get(r) as usize;
        for c in 0..probs.cols() {
            pairs.push((probs.get(r, c) as f64, if c == y { 1.0 } else { 0.0 }));
        }
    }
    fit_isotonic(pairs)
}

fn apply_map_rows<'a, F>(maps: F, probs: &DenseMatrix) -> DenseMatrix
where
    F: Fn(usize) -> &'a IsotonicMap,
{
    let n = probs.rows();
    let c = probs.cols();
    let mut out = DenseMatrix::zeros(n, c);
    for r in 0..n {
        let mut row: Vec<f64> = (0..c)
            .map(|ci| maps(ci).eval(probs.get(r, ci) as f64).clamp(PROB_FLOOR, 1.0))
            .collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        for (ci, v) in row.into_iter().enumerate() {
            out.set(r, ci, v as f32);
        }
    }
    out
}

/// Applies the shared map elementwise, clamps to [1e-6, 1], and
/// renormalizes each row.
pub fn apply_irm(map: &IsotonicMap, probs: &DenseMatrix) -> DenseMatrix {
    apply_map_rows(|_| map, probs)
}

/// One-vs-all isotonic regression: per-class PAV of the class
/// probability against the class indicator.
pub fn fit_ir(probs: &DenseMatrix, labels: &LabelVector) -> Result<OvaIsotonic> {
    if probs.rows() == 0 {
        return Err(DacError::Config("fit_ir on empty input".into()));
    }
    let mut maps = Vec::with_capacity(probs.cols());
    for c in 0..probs.cols() {
        let pairs: Vec<(f64, f64)> = (0..probs.rows())
            .map(|r| {
                (
                    probs.get(r, c) as f64,
                    if labels.get(r) as usize == c { 1.0 } else { 0.0 },
                )
            })
            .collect();
        maps.push(fit_isotonic(pairs)?);
    }
    Ok(OvaIsotonic { maps })
}

/// Applies the per-class maps then renormalizes rows. Not accuracy
/// preserving.
pub fn apply_ir(model: &OvaIsotonic, probs: &DenseMatrix) -> DenseMatrix {
    apply_map_rows(|c| &model.maps[c], probs)
}

/// Baseline calibrator family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    /// Identity: plain softmax of the (possibly rescaled) logits.
    None,
    Ts,
    Ets,
    Irm,
    Ir,
}

/// Parsed `<base>[+dac]` method string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub base: BaseKind,
    pub use_dac: bool,
}

impl FromStr for MethodSpec {
    type Err = DacError;

    fn from_str(s: &str) -> Result<Self> {
        let (base_str, use_dac) = match s.strip_suffix("+dac") {
            Some(prefix) => (prefix, true),
            None => (s, false),
        };
        let base = match base_str {
            "none" => BaseKind::None,
            "ts" => BaseKind::Ts,
            "ets" => BaseKind::Ets,
            "irm" => BaseKind::Irm,
            "ir" => BaseKind::Ir,
            other => {
                return Err(DacError::Config(format!(
                    "unknown method {:?}; expected <base>[+dac] with base in {{ts, ets, irm, ir, none}}",
                    other
                )))
            }
        };
        Ok(MethodSpec { base, use_dac })
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let base = match self.base {
            BaseKind::None => "none",
            BaseKind::Ts => "ts",
            BaseKind::Ets => "ets",
            BaseKind::Irm => "irm",
            BaseKind::Ir => "ir",
        };
        if self.use_dac {
            write!(f, "{}+dac", base)
        } else {
            write!(f, "{}", base)
        }
    }
}

/// A fitted baseline calibrator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseCalibrator {
    None,
    Ts(TempScaler),
    Ets(EtsModel),
    Irm(IsotonicMap),
    Ir(OvaIsotonic),
}

impl BaseCalibrator {
    fn fit(kind: BaseKind, logits: &DenseMatrix, labels: &LabelVector) -> Result<Self> {
        Ok(match kind {
            BaseKind::None => BaseCalibrator::None,
            BaseKind::Ts => BaseCalibrator::Ts(fit_ts(logits, labels)?),
            BaseKind::Ets => BaseCalibrator::Ets(fit_ets(logits, labels)?),
            BaseKind::Irm => BaseCalibrator::Irm(fit_irm(&softmax_rows(logits), labels)?),
            BaseKind::Ir => BaseCalibrator::Ir(fit_ir(&softmax_rows(logits), labels)?),
        })
    }

    /// Turns (possibly rescaled) logits into calibrated probabilities.
    pub fn apply(&self, logits: &DenseMatrix) -> DenseMatrix {
        match self {
            BaseCalibrator::None => softmax_rows(logits),
            BaseCalibrator::Ts(m) => apply_ts(m, logits),
            BaseCalibrator::Ets(m) => apply_ets(m, logits),
            BaseCalibrator::Irm(m) => apply_irm(m, &softmax_rows(logits)),
            BaseCalibrator::Ir(m) => apply_ir(m, &softmax_rows(logits)),
        }
    }
}

/// A baseline calibrator, optionally preceded by the density-aware
/// scaler. The apply path mirrors the fit path exactly: when the scaler
/// is present, logits are rescaled before the baseline runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibratorModel {
    pub dac: Option<DacModel>,
    pub base: BaseCalibrator,
}

impl CalibratorModel {
    /// Calibrated probabilities for one split. `indices` is required
    /// exactly when the model embeds a density-aware scaler.
    pub fn apply(
        &self,
        dataset: &CalibrationDataset,
        indices: Option<&[KnnIndex]>,
    ) -> Result<DenseMatrix> {
        let logits = match &self.dac {
            Some(dac) => {
                let indices = indices.ok_or_else(|| {
                    DacError::Config("model uses DAC but no indices were supplied".into())
                })?;
                let densities = density_profile(dataset, indices)?;
                rescale_logits(dac, &dataset.logits, &densities)?
            }
            None => dataset.logits.clone(),
        };
        Ok(self.base.apply(&logits))
    }
}

/// Fits the full composition on a labeled validation set: the scaler
/// first (when requested), then the baseline on the rescaled validation
/// logits.
pub fn compose(
    base: BaseKind,
    dac_indices: Option<&[KnnIndex]>,
    val: &CalibrationDataset,
) -> Result<(CalibratorModel, Option<FitReport>)> {
    let labels = val
        .labels
        .as_ref()
        .ok_or_else(|| DacError::Config("compose requires a labeled validation set".into()))?;
    let (dac, report, fit_logits) = match dac_indices {
        Some(indices) => {
            let densities = density_profile(val, indices)?;
            let ks: Vec<usize> = indices.iter().map(|i| i.k()).collect();
            let (model, report) = fit_dac(val, &densities, &ks)?;
            let rescaled = rescale_logits(&model, &val.logits, &densities)?;
            (Some(model), Some(report), rescaled)
        }
        None => (None, None, val.logits.clone()),
    };
    let base = BaseCalibrator::fit(base, &fit_logits, labels)?;
    Ok((CalibratorModel { dac, base }, report))
}

/// On-disk representation of a fitted calibrator.
#[derive(Debug, Serialize, Deserialize)]
pub struct CalibratorFile {
    pub method: String,
    pub model: CalibratorModel,
    /// Checksums of the kNN reference tensors the scaler was fitted
    /// against (empty without DAC).
    pub index_checksums: Vec<String>,
    pub fit_report: Option<FitReport>,
}

impl CalibratorFile {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| DacError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DacError::Format(e.to_string()))
    }
}
