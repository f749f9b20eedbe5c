//! Pooling, normalization, and softmax primitives.
//!
//! Entries are stored as f32; sums, norms, and exponentials accumulate
//! in f64 to bound drift.

use crate::error::{DacError, Result};
use crate::par::map_indexed;
use crate::tensor::DenseMatrix;

/// Averages over the spatial axis of an `N x (C*S)` feature matrix,
/// producing `N x C`. Channel c of row n is the mean of entries
/// `c*S .. (c+1)*S`.
pub fn spatial_average(features: &DenseMatrix, channels: usize, spatial: usize) -> Result<DenseMatrix> {
    if spatial == 0 || features.cols() != channels * spatial {
        return Err(DacError::Shape(format!(
            "cols {} != channels {} * spatial {}",
            features.cols(),
            channels,
            spatial
        )));
    }
    if spatial == 1 {
        return Ok(features.clone());
    }
    let n = features.rows();
    let rows = map_indexed(n, |r| {
        let row = features.row(r);
        let mut out = Vec::with_capacity(channels);
        for c in 0..channels {
            let mut acc = 0.0f64;
            for s in 0..spatial {
                acc += row[c * spatial + s] as f64;
            }
            out.push((acc / spatial as f64) as f32);
        }
        out
    });
    let mut data = Vec::with_capacity(n * channels);
    for row in rows {
        data.extend_from_slice(&row);
    }
    DenseMatrix::new(n, channels, data)
}

/// Scales each row to unit euclidean norm. All-zero rows pass through
/// unchanged with a logged warning; distances against unit vectors stay
/// well defined for them.
pub fn l2_normalize_rows(features: &DenseMatrix) -> DenseMatrix {
    let (out, zero_rows) = l2_normalize_rows_counting(features);
    if zero_rows > 0 {
        log::warn!("l2_normalize_rows: {} all-zero row(s) left unnormalized", zero_rows);
    }
    out
}

pub(crate) fn l2_normalize_rows_counting(features: &DenseMatrix) -> (DenseMatrix, usize) {
    let n = features.rows();
    let cols = features.cols();
    let rows = map_indexed(n, |r| {
        let row = features.row(r);
        let norm = row_norm(row);
        if norm == 0.0 {
            (row.to_vec(), true)
        } else {
            (row.iter().map(|&v| (v as f64 / norm) as f32).collect(), false)
        }
    });
    let mut data = Vec::with_capacity(n * cols);
    let mut zero_rows = 0usize;
    for (row, zero) in rows {
        data.extend_from_slice(&row);
        zero_rows += zero as usize;
    }
    (
        DenseMatrix::new(n, cols, data).expect("shape preserved"),
        zero_rows,
    )
}

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Row-wise softmax with per-row max subtraction; rows sum to 1 and the
/// argmax is preserved.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let n = logits.rows();
    let cols = logits.cols();
    let rows = map_indexed(n, |r| softmax_row_f64(logits.row(r)));
    let mut data = Vec::with_capacity(n * cols);
    for row in rows {
        data.extend(row.into_iter().map(|v| v as f32));
    }
    DenseMatrix::new(n, cols, data).expect("shape preserved")
}

/// Softmax of a single f32 row computed in f64 (shared by the fitting
/// objectives, which need the extra precision).
pub(crate) fn softmax_row_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    exps
}

/// Softmax of logits divided by a per-row temperature, in f64.
pub(crate) fn softmax_scaled_row_f64(row: &[f32], scale: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / scale).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    exps
}
