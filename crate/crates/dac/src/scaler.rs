//! The density-aware scaler: a constrained linear combination of
//! per-layer density proxies divides each sample's logits.
//!
//! `S(x) = sum_l w_l * s_l + w_0` with `w_l >= 0` and `w_0 >= 1e-6`, so
//! the divisor is strictly positive and the per-sample argmax survives
//! rescaling. Fitting minimizes the squared error between the rescaled
//! softmax and one-hot labels over a held-out validation set, by
//! projected gradient descent on the constraint box with analytic
//! gradients.

use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::error::{DacError, Result};
use crate::knn::{density_profile, DensityMatrix, KnnIndex};
use crate::ops::softmax_scaled_row_f64;
use crate::opt::golden_section;
use crate::par::map_indexed;
use crate::tensor::DenseMatrix;

/// Lower bound on the bias term; keeps the divisor away from zero.
pub const BIAS_FLOOR: f64 = 1e-6;

const MAX_ITERATIONS: usize = 500;
const LOSS_TOL: f64 = 1e-9;
const PROJ_GRAD_TOL: f64 = 1e-7;

/// Nonnegative layer weights plus a positive bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DacModel {
    pub layer_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub k_per_layer: Vec<usize>,
}

impl DacModel {
    /// A bias-only model: rescaling by the constant `bias`, ignoring all
    /// layers.
    pub fn bias_only(bias: f64) -> Self {
        DacModel {
            layer_names: Vec::new(),
            weights: Vec::new(),
            bias: bias.max(BIAS_FLOOR),
            k_per_layer: Vec::new(),
        }
    }

    pub fn check_feasible(&self) -> Result<()> {
        if self.weights.len() != self.layer_names.len() {
            return Err(DacError::Config("weight/layer count mismatch".into()));
        }
        if self.weights.iter().any(|&w| w < 0.0) || self.bias < BIAS_FLOOR {
            return Err(DacError::Config("infeasible DAC weights".into()));
        }
        Ok(())
    }
}

/// Fit diagnostics, including normalized weight shares (bias last) for
/// layer-importance reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub iterations: usize,
    pub initial_bias: f64,
    pub converged: bool,
    /// One share per layer plus one for the bias, nonnegative, summing
    /// to 1.
    pub weight_shares: Vec<f64>,
}

fn check_layers(model: &DacModel, densities: &DensityMatrix) -> Result<()> {
    if model.layer_names.len() != densities.layer_names.len()
        || model
            .layer_names
            .iter()
            .zip(&densities.layer_names)
            .any(|(a, b)| a != b)
    {
        return Err(DacError::Config(format!(
            "model layers {:?} do not match density layers {:?}",
            model.layer_names, densities.layer_names
        )));
    }
    Ok(())
}

/// Per-sample divisor `S = sum_l w_l * s_l + w_0`; always >= BIAS_FLOOR.
pub fn scale_factor(model: &DacModel, densities: &DensityMatrix) -> Result<Vec<f64>> {
    check_layers(model, densities)?;
    model.check_feasible()?;
    let n = densities.values.rows();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = densities.values.row(r);
        let mut s = model.bias;
        for (w, &d) in model.weights.iter().zip(row) {
            s += w * d as f64;
        }
        out.push(s);
    }
    Ok(out)
}

/// Divides each logit row by its sample's scale factor.
pub fn rescale_logits(
    model: &DacModel,
    logits: &DenseMatrix,
    densities: &DensityMatrix,
) -> Result<DenseMatrix> {
    if logits.rows() != densities.values.rows() {
        return Err(DacError::Shape(format!(
            "{} logit rows vs {} density rows",
            logits.rows(),
            densities.values.rows()
        )));
    }
    let scales = scale_factor(model, densities)?;
    let mut out = logits.clone();
    for (r, s) in scales.iter().enumerate() {
        for v in out.row_mut(r) {
            *v = (*v as f64 / s) as f32;
        }
    }
    Ok(out)
}

/// Rescales a dataset's logits using densities computed from the given
/// (train-built) indices.
pub fn apply_dac(
    model: &DacModel,
    dataset: &CalibrationDataset,
    indices: &[KnnIndex],
) -> Result<DenseMatrix> {
    let densities = density_profile(dataset, indices)?;
    rescale_logits(model, &dataset.logits, &densities)
}

/// Parameter vector layout for the objective: layer weights first, bias
/// last.
fn unpack(params: &[f64]) -> (&[f64], f64) {
    let l = params.len() - 1;
    (&params[..l], params[l])
}

fn project(params: &mut [f64]) {
    let l = params.len() - 1;
    for w in &mut params[..l] {
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    if params[l] < BIAS_FLOOR {
        params[l] = BIAS_FLOOR;
    }
}

/// Squared-error objective of the rescaled softmax against one-hot
/// labels, summed over samples. Per-sample terms are computed
/// independently (parallel) and reduced in index order, so the value is
/// deterministic regardless of thread count.
pub fn squared_error_loss(
    logits: &DenseMatrix,
    labels: &[u32],
    densities: &DenseMatrix,
    params: &[f64],
) -> f64 {
    let (weights, bias) = unpack(params);
    let per_sample = map_indexed(logits.rows(), |n| {
        let s = sample_scale(densities.row(n), weights, bias);
        let p = softmax_scaled_row_f64(logits.row(n), s);
        let y = labels[n] as usize;
        p.iter()
            .enumerate()
            .map(|(c, &pc)| {
                let i = if c == y { 1.0 } else { 0.0 };
                (pc - i) * (pc - i)
            })
            .sum::<f64>()
    });
    per_sample.iter().sum()
}

/// Loss plus its analytic gradient w.r.t. (w_1..w_L, w_0).
pub fn squared_error_loss_grad(
    logits: &DenseMatrix,
    labels: &[u32],
    densities: &DenseMatrix,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let (weights, bias) = unpack(params);
    // per-sample: (loss_n, dloss_n/dS_n)
    let per_sample = map_indexed(logits.rows(), |n| {
        let z = logits.row(n);
        let s = sample_scale(densities.row(n), weights, bias);
        let p = softmax_scaled_row_f64(z, s);
        let y = labels[n] as usize;
        let zbar: f64 = p.iter().zip(z).map(|(&pc, &zc)| pc * zc as f64).sum();
        let mut loss = 0.0;
        let mut dls = 0.0;
        for (c, &pc) in p.iter().enumerate() {
            let i = if c == y { 1.0 } else { 0.0 };
            let diff = pc - i;
            loss += diff * diff;
            // dp_c/dS = -p_c (z_c - zbar) / S^2
            dls += 2.0 * diff * (-pc * (z[c] as f64 - zbar) / (s * s));
        }
        (loss, dls)
    });
    let l = weights.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; l + 1];
    for (n, (ln, g)) in per_sample.into_iter().enumerate() {
        loss += ln;
        let srow = densities.row(n);
        for li in 0..l {
            grad[li] += g * srow[li] as f64;
        }
        grad[l] += g;
    }
    (loss, grad)
}

fn sample_scale(density_row: &[f32], weights: &[f64], bias: f64) -> f64 {
    let mut s = bias;
    for (w, &d) in weights.iter().zip(density_row) {
        s += w * d as f64;
    }
    s
}

/// Squared-error-optimal single temperature by golden-section search
/// over log-temperature in [-3, 3]. This is the bias initialization and
/// the temperature-scaling reduction point.
pub fn best_constant_scale(logits: &DenseMatrix, labels: &[u32]) -> f64 {
    let zero_densities = DenseMatrix::zeros(logits.rows(), 0);
    let t = golden_section(
        |lnt| squared_error_loss(logits, labels, &zero_densities, &[lnt.exp()]),
        -3.0,
        3.0,
        1e-9,
    );
    t.exp()
}

/// Fits the scaler on a labeled validation set against densities
/// computed from indices built on the train split. Weights start at 0
/// and the bias at the best constant scale, so the returned objective
/// never exceeds the bias-only (temperature scaling) optimum.
pub fn fit_dac(
    val: &CalibrationDataset,
    densities: &DensityMatrix,
    k_per_layer: &[usize],
) -> Result<(DacModel, FitReport)> {
    let labels = val
        .labels
        .as_ref()
        .ok_or_else(|| DacError::Config("fit_dac requires a labeled validation set".into()))?;
    let n = val.num_samples();
    if n < 2 {
        return Err(DacError::Config(format!(
            "fit_dac requires at least 2 validation samples, got {}",
            n
        )));
    }
    if densities.values.rows() != n {
        return Err(DacError::Shape(format!(
            "{} density rows vs {} validation samples",
            densities.values.rows(),
            n
        )));
    }
    let num_layers = densities.layer_names.len();
    if k_per_layer.len() != num_layers {
        return Err(DacError::Config(format!(
            "{} k values for {} layers",
            k_per_layer.len(),
            num_layers
        )));
    }
    if densities.values.data().iter().any(|&v| v < 0.0) {
        return Err(DacError::Data("negative density entry".into()));
    }

    let logits = &val.logits;
    let label_slice = labels.as_slice();
    let initial_bias = best_constant_scale(logits, label_slice).max(BIAS_FLOOR);

    let mut params = vec![0.0; num_layers + 1];
    params[num_layers] = initial_bias;
    let density_values = &densities.values;

    let mut loss = squared_error_loss(logits, label_slice, density_values, &params);
    let mut step = 1.0f64;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 1..=MAX_ITERATIONS {
        iterations = iter;
        let (cur_loss, grad) =
            squared_error_loss_grad(logits, label_slice, density_values, &params);
        loss = cur_loss;

        let pg_norm: f64 = params
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (&p, &g))| {
                let mut moved = [p - g];
                if i + 1 == params.len() {
                    if moved[0] < BIAS_FLOOR {
                        moved[0] = BIAS_FLOOR;
                    }
                } else if moved[0] < 0.0 {
                    moved[0] = 0.0;
                }
                let d = p - moved[0];
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if pg_norm < PROJ_GRAD_TOL {
            converged = true;
            break;
        }

        // backtracking on the projected step; only accepted moves
        // decrease the objective
        let mut accepted = false;
        let mut backtracked = false;
        while step > 1e-18 {
            let mut candidate: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(&p, &g)| p - step * g)
                .collect();
            project(&mut candidate);
            let moved_sq: f64 = candidate
                .iter()
                .zip(&params)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if moved_sq == 0.0 {
                break;
            }
            let new_loss =
                squared_error_loss(logits, label_slice, density_values, &candidate);
            if new_loss <= loss - 1e-4 * moved_sq / step {
                let rel_change = (loss - new_loss) / loss.max(f64::MIN_POSITIVE);
                params = candidate;
                loss = new_loss;
                accepted = true;
                // a small relative decrease only signals convergence
                // when the step was not backtracked this iteration;
                // otherwise a truncated step near a constraint face
                // would stop the fit while large descent directions
                // remain
                if !backtracked && rel_change < LOSS_TOL {
                    converged = true;
                }
                break;
            }
            backtracked = true;
            step *= 0.5;
        }
        if !accepted {
            // no descent direction available at machine precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
        step = (step * 2.0).min(1e6);
    }

    let (weights, bias) = {
        let l = params.len() - 1;
        (params[..l].to_vec(), params[l])
    };
    let total: f64 = weights.iter().sum::<f64>() + bias;
    let mut weight_shares: Vec<f64> = weights.iter().map(|&w| w / total).collect();
    weight_shares.push(bias / total);

    let model = DacModel {
        layer_names: densities.layer_names.clone(),
        weights,
        bias,
        k_per_layer: k_per_layer.to_vec(),
    };
    model.check_feasible()?;
    let report = FitReport {
        final_loss: loss,
        iterations,
        initial_bias,
        converged,
        weight_shares,
    };
    Ok((model, report))
}
