//! Calibration metrics (ECE variants, Brier, NLL, reliability data) and
//! the OOD battery (FPR@TPR, detection error, AUROC, AUPR).

use serde::{Deserialize, Serialize};

use crate::dataset::LabelVector;
use crate::error::{DacError, Result};
use crate::tensor::DenseMatrix;

/// Per-bin record for reliability diagrams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Binned confidence statistics; counts sum to N.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStats {
    pub bins: Vec<Bin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinningScheme {
    EqualWidth,
    EqualMass,
}

/// Top-class confidences on the in-domain test set and on the OOD set.
/// In-domain counts as the positive class; higher score = more in.
#[derive(Debug, Clone)]
pub struct OodScores {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

impl OodScores {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(DacError::Config("empty OOD score set".into()));
        }
        for &s in in_scores.iter().chain(&out_scores) {
            if !(0.0..=1.0).contains(&s) {
                return Err(DacError::Data(format!("score {} outside [0, 1]", s)));
            }
        }
        Ok(Self { in_scores, out_scores })
    }

    /// Top-class confidences of a probability matrix.
    pub fn confidences(probs: &DenseMatrix) -> Vec<f64> {
        (0..probs.rows())
            .map(|r| probs.get(r, probs.row_argmax(r)) as f64)
            .collect()
    }
}

/// (confidence, correct) pairs from row-stochastic probabilities and
/// labels.
fn predictions(probs: &DenseMatrix, labels: &LabelVector) -> Result<Vec<(f64, bool)>> {
    if probs.rows() == 0 {
        return Err(DacError::Config("empty input".into()));
    }
    if probs.rows() != labels.len() {
        return Err(DacError::Shape("probability/label row mismatch".into()));
    }
    Ok((0..probs.rows())
        .map(|r| {
            let pred = probs.row_argmax(r);
            (probs.get(r, pred) as f64, pred == labels.get(r) as usize)
        })
        .collect())
}

/// Equal-width bin of a confidence: bins are half-open (lo, hi] with
/// p = 0 landing in the first bin.
fn equal_width_bin(p: f64, m: usize) -> usize {
    if p <= 0.0 {
        0
    } else {
        ((p * m as f64).ceil() as usize).clamp(1, m) - 1
    }
}

fn stats_from_assignment(
    pairs: &[(f64, bool)],
    assignment: &[usize],
    edges: Vec<(f64, f64)>,
) -> (f64, BinStats) {
    let m = edges.len();
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0f64; m];
    let mut correct = vec![0usize; m];
    for (&(conf, ok), &b) in pairs.iter().zip(assignment) {
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += ok as usize;
    }
    let n = pairs.len() as f64;
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(m);
    for b in 0..m {
        let (mean_confidence, accuracy) = if count[b] > 0 {
            (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece += count[b] as f64 / n * (accuracy - mean_confidence).abs();
        }
        bins.push(Bin {
            lower: edges[b].0,
            upper: edges[b].1,
            count: count[b],
            mean_confidence,
            accuracy,
        });
    }
    (ece, BinStats { bins })
}

fn ece_equal_width_pairs(pairs: &[(f64, bool)], m: usize) -> (f64, BinStats) {
    let assignment: Vec<usize> = pairs.iter().map(|&(p, _)| equal_width_bin(p, m)).collect();
    let edges: Vec<(f64, f64)> = (0..m)
        .map(|b| (b as f64 / m as f64, (b + 1) as f64 / m as f64))
        .collect();
    stats_from_assignment(pairs, &assignment, edges)
}

/// Equal-width ECE with M bins of width 1/M.
pub fn ece_equal_width(
    probs: &DenseMatrix,
    labels: &LabelVector,
    bins: usize,
) -> Result<(f64, BinStats)> {
    if bins == 0 {
        return Err(DacError::Config("bins must be positive".into()));
    }
    let pairs = predictions(probs, labels)?;
    Ok(ece_equal_width_pairs(&pairs, bins))
}

/// Equal-mass ECE: samples sorted (stably) by confidence split into M
/// contiguous groups whose sizes differ by at most one; the first
/// `N mod M` groups take the larger size.
pub fn ece_equal_mass(
    probs: &DenseMatrix,
    labels: &LabelVector,
    bins: usize,
) -> Result<(f64, BinStats)> {
    let pairs = predictions(probs, labels)?;
    let n = pairs.len();
    if bins == 0 || n < bins {
        return Err(DacError::Config(format!(
            "equal-mass binning needs N >= M, got N={} M={}",
            n, bins
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));

    let base = n / bins;
    let extra = n % bins;
    let mut assignment = vec![0usize; n];
    let mut edges = Vec::with_capacity(bins);
    let mut pos = 0usize;
    for b in 0..bins {
        let size = base + (b < extra) as usize;
        let members = &order[pos..pos + size];
        for &i in members {
            assignment[i] = b;
        }
        let lo = pairs[members[0]].0;
        let hi = pairs[members[size - 1]].0;
        edges.push((lo, hi));
        pos += size;
    }
    Ok(stats_from_assignment(&pairs, &assignment, edges))
}

/// Class-wise ECE: for each class, the equal-width ECE of the class
/// probability column against the class indicator. Returns the sum over
/// classes plus the per-class values (so a mean convention stays
/// recoverable).
pub fn classwise_ece(
    probs: &DenseMatrix,
    labels: &LabelVector,
    bins: usize,
) -> Result<(f64, Vec<f64>)> {
    if probs.rows() == 0 {
        return Err(DacError::Config("empty input".into()));
    }
    if bins == 0 {
        return Err(DacError::Config("bins must be positive".into()));
    }
    let mut per_class = Vec::with_capacity(probs.cols());
    for c in 0..probs.cols() {
        let pairs: Vec<(f64, bool)> = (0..probs.rows())
            .map(|r| (probs.get(r, c) as f64, labels.get(r) as usize == c))
            .collect();
        per_class.push(ece_equal_width_pairs(&pairs, bins).0);
    }
    Ok((per_class.iter().sum(), per_class))
}

/// Mean over samples of the squared distance between the probability
/// row and the one-hot label; range [0, 2].
pub fn brier(probs: &DenseMatrix, labels: &LabelVector) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(DacError::Config("empty input".into()));
    }
    let mut acc = 0.0f64;
    for r in 0..probs.rows() {
        let y = labels.get(r) as usize;
        for c in 0..probs.cols() {
            let target = if c == y { 1.0 } else { 0.0 };
            let d = probs.get(r, c) as f64 - target;
            acc += d * d;
        }
    }
    Ok(acc / probs.rows() as f64)
}

/// Mean negative log-likelihood of the true class, probabilities
/// floored at 1e-12.
pub fn nll(probs: &DenseMatrix, labels: &LabelVector) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(DacError::Config("empty input".into()));
    }
    let mut acc = 0.0f64;
    for r in 0..probs.rows() {
        let p = (probs.get(r, labels.get(r) as usize) as f64).max(1e-12);
        acc += -p.ln();
    }
    Ok(acc / probs.rows() as f64)
}

/// Per-bin (confidence, accuracy, count) table for reliability
/// diagrams.
pub fn reliability_data(
    probs: &DenseMatrix,
    labels: &LabelVector,
    bins: usize,
    scheme: BinningScheme,
) -> Result<BinStats> {
    match scheme {
        BinningScheme::EqualWidth => Ok(ece_equal_width(probs, labels, bins)?.1),
        BinningScheme::EqualMass => Ok(ece_equal_mass(probs, labels, bins)?.1),
    }
}

fn distinct_thresholds_descending(scores: &OodScores) -> Vec<f64> {
    let mut all: Vec<f64> = scores
        .in_scores
        .iter()
        .chain(&scores.out_scores)
        .cloned()
        .collect();
    all.sort_by(|a, b| b.total_cmp(a));
    all.dedup();
    all
}

fn rates_at(scores: &OodScores, threshold: f64) -> (f64, f64) {
    let tp = scores.in_scores.iter().filter(|&&s| s >= threshold).count();
    let fp = scores.out_scores.iter().filter(|&&s| s >= threshold).count();
    (
        tp as f64 / scores.in_scores.len() as f64,
        fp as f64 / scores.out_scores.len() as f64,
    )
}

/// FPR at the first threshold (sweeping distinct score values
/// descending) whose TPR reaches the target.
pub fn fpr_at_tpr(scores: &OodScores, tpr_target: f64) -> Result<f64> {
    if !(0.0 < tpr_target && tpr_target <= 1.0) {
        return Err(DacError::Config(format!("tpr target {} outside (0, 1]", tpr_target)));
    }
    for t in distinct_thresholds_descending(scores) {
        let (tpr, fpr) = rates_at(scores, t);
        if tpr >= tpr_target {
            return Ok(fpr);
        }
    }
    unreachable!("TPR reaches 1 at the minimum score");
}

/// Minimum over thresholds of the equal-prior error
/// 0.5 (1 - TPR) + 0.5 FPR.
pub fn detection_error(scores: &OodScores) -> f64 {
    // the all-negative threshold (TPR = FPR = 0) gives 0.5
    let mut best = 0.5f64;
    for t in distinct_thresholds_descending(scores) {
        let (tpr, fpr) = rates_at(scores, t);
        best = best.min(0.5 * (1.0 - tpr) + 0.5 * fpr);
    }
    best
}

/// AUROC as the Mann-Whitney rank statistic:
/// P(in > out) + 0.5 P(in == out).
pub fn auroc(scores: &OodScores) -> f64 {
    let n_in = scores.in_scores.len();
    let n_out = scores.out_scores.len();
    let mut all: Vec<(f64, bool)> = scores
        .in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // average ranks over tie groups
    let mut rank_sum_in = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_in += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_in - (n_in * (n_in + 1)) as f64 / 2.0;
    u / (n_in as f64 * n_out as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuprPositive {
    /// In-domain is the positive class; higher score = positive.
    In,
    /// OOD is the positive class; lower score = positive (scores are
    /// negated internally).
    Out,
}

/// Area under precision-recall by exact step-wise summation over
/// distinct thresholds (no interpolation).
pub fn aupr(scores: &OodScores, positive: AuprPositive) -> f64 {
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        AuprPositive::In => (scores.in_scores.clone(), scores.out_scores.clone()),
        AuprPositive::Out => (
            scores.out_scores.iter().map(|&s| -s).collect(),
            scores.in_scores.iter().map(|&s| -s).collect(),
        ),
    };
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).cloned().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let n_pos = pos.len() as f64;
    let mut area = 0.0f64;
    let mut prev_recall = 0.0f64;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        if tp + fp == 0.0 {
            continue;
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_pos;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// Unweighted mean across evaluation conditions.
pub fn macro_average(per_condition: &[f64]) -> Result<f64> {
    if per_condition.is_empty() {
        return Err(DacError::Config("macro average over no conditions".into()));
    }
    Ok(per_condition.iter().sum::<f64>() / per_condition.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: Vec<u32>, c: usize) -> LabelVector {
        LabelVector::new(v, c).unwrap()
    }

    fn binary_probs(confs: &[f64], correct: &[bool]) -> (DenseMatrix, LabelVector) {
        // class 0 is always predicted with probability conf; the label
        // is 0 when correct
        let rows: Vec<Vec<f32>> = confs
            .iter()
            .map(|&p| vec![p as f32, 1.0 - p as f32])
            .collect();
        let y: Vec<u32> = correct.iter().map(|&ok| if ok { 0 } else { 1 }).collect();
        (DenseMatrix::from_rows(&rows).unwrap(), labels(y, 2))
    }

    #[test]
    fn ece_zero_for_perfect_confident_predictions() {
        let (p, y) = binary_probs(&[1.0; 10], &[true; 10]);
        let (ece, stats) = ece_equal_width(&p, &y, 15).unwrap();
        assert_eq!(ece, 0.0);
        let total: usize = stats.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn ece_hand_case_single_bin() {
        let correct: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let (p, y) = binary_probs(&[0.8; 10], &correct);
        let (ece, _) = ece_equal_width(&p, &y, 15).unwrap();
        assert!((ece - 0.3).abs() < 1e-6, "ece {}", ece);
    }

    /// Naive O(N*M) equal-width reference.
    fn ece_width_oracle(pairs: &[(f64, bool)], m: usize) -> f64 {
        let mut total = 0.0;
        for b in 0..m {
            let lo = b as f64 / m as f64;
            let hi = (b + 1) as f64 / m as f64;
            let members: Vec<&(f64, bool)> = pairs
                .iter()
                .filter(|(p, _)| (*p > lo && *p <= hi) || (b == 0 && *p <= lo))
                .collect();
            if members.is_empty() {
                continue;
            }
            let conf: f64 =
                members.iter().map(|(p, _)| p).sum::<f64>() / members.len() as f64;
            let acc: f64 = members.iter().filter(|(_, ok)| *ok).count() as f64
                / members.len() as f64;
            total += members.len() as f64 / pairs.len() as f64 * (acc - conf).abs();
        }
        total
    }

    #[test]
    fn ece_equal_width_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.random_range(1..200);
            // above 0.5 so class 0 really is the predicted class
            let confs: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let (p, y) = binary_probs(&confs, &correct);
            let (ece, _) = ece_equal_width(&p, &y, 15).unwrap();
            let pairs: Vec<(f64, bool)> = (0..n)
                .map(|i| (p.get(i, 0) as f64, correct[i]))
                .collect();
            assert!((ece - ece_width_oracle(&pairs, 15)).abs() < 1e-12);
        }
    }

    #[test]
    fn ece_equal_mass_hand_case() {
        let (p, y) = binary_probs(&[0.6, 0.6, 0.9, 0.9], &[true, false, true, true]);
        let (ece, stats) = ece_equal_mass(&p, &y, 2).unwrap();
        assert!((ece - 0.1).abs() < 1e-6, "ece {}", ece);
        assert_eq!(stats.bins[0].count, 2);
        assert_eq!(stats.bins[1].count, 2);
    }

    #[test]
    fn ece_equal_mass_bin_sizes_differ_by_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 47;
        let confs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (p, y) = binary_probs(&confs, &correct);
        let (_, stats) = ece_equal_mass(&p, &y, 15).unwrap();
        let counts: Vec<usize> = stats.bins.iter().map(|b| b.count).collect();
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1);
        assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn ece_equal_mass_requires_enough_samples() {
        let (p, y) = binary_probs(&[0.9, 0.8], &[true, true]);
        assert!(matches!(
            ece_equal_mass(&p, &y, 15),
            Err(DacError::Config(_))
        ));
    }

    #[test]
    fn classwise_ece_perfectly_calibrated_is_zero() {
        let (p, y) = binary_probs(&[1.0; 8], &[true; 8]);
        let (total, per_class) = classwise_ece(&p, &y, 15).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(per_class.len(), 2);
    }

    #[test]
    fn classwise_ece_degenerate_single_class() {
        let p = DenseMatrix::new(4, 1, vec![1.0; 4]).unwrap();
        let y = labels(vec![0; 4], 1);
        let (total, _) = classwise_ece(&p, &y, 15).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn brier_hand_cases() {
        let (p, y) = binary_probs(&[1.0; 4], &[true; 4]);
        assert_eq!(brier(&p, &y).unwrap(), 0.0);
        let (p, y) = binary_probs(&[0.5; 4], &[true, false, true, false]);
        assert!((brier(&p, &y).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn nll_hand_cases() {
        let (p, y) = binary_probs(&[1.0; 4], &[true; 4]);
        assert_eq!(nll(&p, &y).unwrap(), 0.0);
        let c = 10usize;
        let p = DenseMatrix::new(3, c, vec![0.1; 30]).unwrap();
        let y = labels(vec![0, 5, 9], c);
        assert!((nll(&p, &y).unwrap() - (10f64).ln()).abs() < 1e-6);
        // floor keeps zero probabilities finite
        let (p, y) = binary_probs(&[1.0], &[false]);
        assert!(nll(&p, &y).unwrap().is_finite());
    }

    #[test]
    fn fpr_at_tpr_separated_and_identical() {
        let s = OodScores::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(fpr_at_tpr(&s, 0.95).unwrap(), 0.0);
        let same = vec![0.1, 0.4, 0.4, 0.9];
        let s = OodScores::new(same.clone(), same).unwrap();
        assert!(fpr_at_tpr(&s, 0.95).unwrap() >= 0.95);
    }

    #[test]
    fn detection_error_edges() {
        let s = OodScores::new(vec![0.9, 1.0], vec![0.0, 0.1]).unwrap();
        assert_eq!(detection_error(&s), 0.0);
        let same = vec![0.2, 0.5, 0.8];
        let s = OodScores::new(same.clone(), same).unwrap();
        assert!((detection_error(&s) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_edges_and_pairwise_oracle() {
        let s = OodScores::new(vec![0.9, 1.0], vec![0.1, 0.2]).unwrap();
        assert_eq!(auroc(&s), 1.0);
        let s = OodScores::new(vec![0.5; 3], vec![0.5; 4]).unwrap();
        assert_eq!(auroc(&s), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n_in = rng.random_range(1..60);
            let n_out = rng.random_range(1..60);
            // quantized to force ties
            let q = |r: &mut ChaCha8Rng| (r.random_range(0..10) as f64) / 10.0;
            let ins: Vec<f64> = (0..n_in).map(|_| q(&mut rng)).collect();
            let outs: Vec<f64> = (0..n_out).map(|_| q(&mut rng)).collect();
            let s = OodScores::new(ins.clone(), outs.clone()).unwrap();
            let mut oracle = 0.0f64;
            for &a in &ins {
                for &b in &outs {
                    oracle += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            oracle /= (n_in * n_out) as f64;
            assert!((auroc(&s) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let outs: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = OodScores::new(ins.clone(), outs.clone()).unwrap();
        let transform = |v: f64| v * v * 0.9 + 0.05;
        let s2 = OodScores::new(
            ins.iter().map(|&v| transform(v)).collect(),
            outs.iter().map(|&v| transform(v)).collect(),
        )
        .unwrap();
        assert!((auroc(&s) - auroc(&s2)).abs() < 1e-12);
    }

    #[test]
    fn aupr_edges() {
        let s = OodScores::new(vec![0.9, 1.0], vec![0.1, 0.2]).unwrap();
        assert_eq!(aupr(&s, AuprPositive::In), 1.0);
        assert_eq!(aupr(&s, AuprPositive::Out), 1.0);
        // constant scores: precision equals prevalence at full recall
        let s = OodScores::new(vec![0.5; 30], vec![0.5; 70]).unwrap();
        assert!((aupr(&s, AuprPositive::In) - 0.3).abs() < 1e-12);
        assert!((aupr(&s, AuprPositive::Out) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn macro_average_basics() {
        assert_eq!(macro_average(&[2.5]).unwrap(), 2.5);
        assert_eq!(macro_average(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn ece_invariant_under_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let confs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let (p, y) = binary_probs(&confs, &correct);
        let (e1, _) = ece_equal_width(&p, &y, 15).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let permuted_confs: Vec<f64> = order.iter().map(|&i| confs[i]).collect();
        let permuted_correct: Vec<bool> = order.iter().map(|&i| correct[i]).collect();
        let (p2, y2) = binary_probs(&permuted_confs, &permuted_correct);
        let (e2, _) = ece_equal_width(&p2, &y2, 15).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }
}
