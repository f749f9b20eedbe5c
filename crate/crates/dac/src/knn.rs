//! Exact kth-nearest-neighbor distance queries over normalized training
//! embeddings, one index per feature layer.
//!
//! Reference vectors live on the unit sphere, so the euclidean distance
//! reduces to `sqrt(max(0, |q|^2 + |r|^2 - 2*dot))` with both squared
//! norms equal to 1 up to f32 rounding; the max guards tiny negative
//! rounding. The kth order statistic is taken by partial selection, not
//! a full sort. Query points that coincide with a reference row
//! contribute distance 0 to the order statistics; the sample's own copy
//! is NOT excluded when query and reference sets overlap (the fitting
//! protocol queries a held-out set, so overlap does not arise there).

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::CalibrationDataset;
use crate::error::{DacError, Result};
use crate::ops::{l2_normalize_rows, row_norm};
use crate::par::{map_indexed, map_indexed_seq};
use crate::tensor::{load_tensor, save_tensor, DenseMatrix};

/// Per-layer reference matrix with fixed k and subsample policy.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    layer_name: String,
    reference: DenseMatrix,
    k: usize,
    subsample_fraction: f64,
    seed: u64,
}

/// kth-NN distances, one column per layer: `values[n][l]` is the density
/// proxy of sample n at layer l. All entries are nonnegative.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    pub values: DenseMatrix,
    pub layer_names: Vec<String>,
}

impl KnnIndex {
    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn reference(&self) -> &DenseMatrix {
        &self.reference
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn subsample_fraction(&self) -> f64 {
        self.subsample_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Builds an index from raw layer features: seed-deterministic uniform
/// subsample without replacement, then row normalization. Zero-norm rows
/// are excluded at build with a warning.
pub fn build_index(
    features: &DenseMatrix,
    layer_name: &str,
    k: usize,
    subsample_fraction: f64,
    seed: u64,
) -> Result<KnnIndex> {
    if features.rows() == 0 {
        return Err(DacError::Config(format!(
            "layer {}: cannot index empty feature matrix",
            layer_name
        )));
    }
    if k == 0 {
        return Err(DacError::Config(format!("layer {}: k must be positive", layer_name)));
    }
    if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
        return Err(DacError::Config(format!(
            "layer {}: subsample fraction {} outside (0, 1]",
            layer_name, subsample_fraction
        )));
    }
    let n = features.rows();
    let m = ((n as f64) * subsample_fraction).floor() as usize;
    let m = m.min(n);
    if m < k {
        return Err(DacError::Config(format!(
            "layer {}: subsample of {} rows is smaller than k={}",
            layer_name, m, k
        )));
    }

    let selected: Vec<usize> = if m == n {
        (0..n).collect()
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        idx
    };

    let cols = features.cols();
    let mut data = Vec::with_capacity(m * cols);
    let mut dropped = 0usize;
    for &i in &selected {
        let row = features.row(i);
        let norm = row_norm(row);
        if norm == 0.0 {
            dropped += 1;
            continue;
        }
        data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    if dropped > 0 {
        log::warn!(
            "build_index({}): dropped {} zero-norm row(s) from reference",
            layer_name,
            dropped
        );
    }
    let kept = data.len() / cols;
    if kept < k {
        return Err(DacError::Config(format!(
            "layer {}: only {} nonzero rows after subsampling, smaller than k={}",
            layer_name, kept, k
        )));
    }
    Ok(KnnIndex {
        layer_name: layer_name.to_string(),
        reference: DenseMatrix::new(kept, cols, data)?,
        k,
        subsample_fraction,
        seed,
    })
}

fn check_query_shape(index: &KnnIndex, queries: &DenseMatrix) -> Result<()> {
    if queries.cols() != index.reference.cols() {
        return Err(DacError::Shape(format!(
            "layer {}: query dim {} != reference dim {}",
            index.layer_name,
            queries.cols(),
            index.reference.cols()
        )));
    }
    Ok(())
}

/// Dot product in f64 over four independent accumulators (lanes are
/// assigned round-robin, remainder included), then reduced pairwise.
/// The fixed lane structure keeps results deterministic while breaking
/// the sequential FP dependency chain; every caller that needs bitwise
/// agreement (norms vs dots for the self-match-zero property) goes
/// through this one function.
fn dot4(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in chunks_a.by_ref().zip(chunks_b.by_ref()) {
        acc[0] += ca[0] as f64 * cb[0] as f64;
        acc[1] += ca[1] as f64 * cb[1] as f64;
        acc[2] += ca[2] as f64 * cb[2] as f64;
        acc[3] += ca[3] as f64 * cb[3] as f64;
    }
    for (lane, (&va, &vb)) in chunks_a.remainder().iter().zip(chunks_b.remainder()).enumerate() {
        acc[lane] += va as f64 * vb as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn sq_norm(row: &[f32]) -> f64 {
    dot4(row, row)
}

/// Distances from one (normalized) query row to every reference row.
///
/// Uses `sqrt(max(0, |q|^2 + |r|^2 - 2 q.r))`; with unit rows this is
/// the euclidean distance on the sphere, and a query bitwise-equal to a
/// reference row yields exactly 0 (norms and dot share the summation
/// order). The max guards tiny negative rounding. Rows that deviate
/// from unit norm beyond f32 roundoff are renormalized first.
fn distances_to_reference(reference: &DenseMatrix, query: &[f32]) -> Vec<f64> {
    let norm = row_norm(query);
    let owned: Vec<f32>;
    let q: &[f32] = if norm > 0.0 && (norm - 1.0).abs() > 1e-6 {
        owned = query.iter().map(|&v| (v as f64 / norm) as f32).collect();
        &owned
    } else {
        query
    };
    let qn = sq_norm(q);
    let mut out = Vec::with_capacity(reference.rows());
    for r in 0..reference.rows() {
        let refr = reference.row(r);
        let dot = dot4(refr, q);
        out.push((qn + sq_norm(refr) - 2.0 * dot).max(0.0).sqrt());
    }
    out
}

fn kth_smallest(mut distances: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = distances.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *kth
}

fn warn_if_denormalized(index: &KnnIndex, queries: &DenseMatrix) {
    let mut worst = 0.0f64;
    for r in 0..queries.rows() {
        let norm = row_norm(queries.row(r));
        if norm > 0.0 {
            worst = worst.max((norm - 1.0).abs());
        }
    }
    if worst > 1e-4 {
        log::warn!(
            "kth_distance({}): query rows deviate from unit norm by up to {:.3e}; renormalizing",
            index.layer_name,
            worst
        );
    }
}

/// kth-smallest euclidean distance from each query row to the reference
/// set. Queries are defensively renormalized (with a warning when any
/// row deviates from unit norm by more than 1e-4).
pub fn kth_distance(index: &KnnIndex, queries: &DenseMatrix) -> Result<Vec<f64>> {
    check_query_shape(index, queries)?;
    warn_if_denormalized(index, queries);
    Ok(map_indexed(queries.rows(), |r| {
        kth_smallest(distances_to_reference(&index.reference, queries.row(r)), index.k)
    }))
}

/// Sequential twin of [`kth_distance`]; benchmark baseline.
pub fn kth_distance_seq(index: &KnnIndex, queries: &DenseMatrix) -> Result<Vec<f64>> {
    check_query_shape(index, queries)?;
    warn_if_denormalized(index, queries);
    Ok(map_indexed_seq(queries.rows(), |r| {
        kth_smallest(distances_to_reference(&index.reference, queries.row(r)), index.k)
    }))
}

/// kth distances for several k values at once, computing each query's
/// distance vector a single time. `ks` entries must be in `1..=M`.
/// Result is one vector per k, in the order given.
pub fn kth_distance_multi(
    index: &KnnIndex,
    queries: &DenseMatrix,
    ks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_query_shape(index, queries)?;
    for &k in ks {
        if k == 0 || k > index.reference.rows() {
            return Err(DacError::Config(format!(
                "layer {}: k={} outside 1..={}",
                index.layer_name,
                k,
                index.reference.rows()
            )));
        }
    }
    warn_if_denormalized(index, queries);
    let max_k = match ks.iter().copied().max() {
        Some(k) => k,
        None => return Ok(Vec::new()),
    };
    let per_query = map_indexed(queries.rows(), |r| {
        let mut d = distances_to_reference(&index.reference, queries.row(r));
        // partition at the largest k, then order only that prefix
        if max_k < d.len() {
            d.select_nth_unstable_by(max_k - 1, |a, b| a.total_cmp(b));
        }
        d[..max_k].sort_unstable_by(|a, b| a.total_cmp(b));
        ks.iter().map(|&k| d[k - 1]).collect::<Vec<f64>>()
    });
    let mut out = vec![Vec::with_capacity(queries.rows()); ks.len()];
    for row in per_query {
        for (slot, v) in out.iter_mut().zip(row) {
            slot.push(v);
        }
    }
    Ok(out)
}

/// Stacks per-layer kth distances into an `N x L` density matrix. Layer
/// features are L2-normalized before querying; index layer names must
/// match the dataset's in order.
pub fn density_profile(dataset: &CalibrationDataset, indices: &[KnnIndex]) -> Result<DensityMatrix> {
    if indices.len() != dataset.layers.len() {
        return Err(DacError::Config(format!(
            "{} indices for {} dataset layers",
            indices.len(),
            dataset.layers.len()
        )));
    }
    for (index, (name, _)) in indices.iter().zip(&dataset.layers) {
        if index.layer_name != *name {
            return Err(DacError::Config(format!(
                "index layer {} does not match dataset layer {}",
                index.layer_name, name
            )));
        }
    }
    let n = dataset.num_samples();
    let l = indices.len();
    let mut values = DenseMatrix::zeros(n, l);
    let mut layer_names = Vec::with_capacity(l);
    for (li, (index, (name, features))) in indices.iter().zip(&dataset.layers).enumerate() {
        let normalized = l2_normalize_rows(features);
        let col = kth_distance(index, &normalized)?;
        for (row, v) in col.into_iter().enumerate() {
            values.set(row, li, v as f32);
        }
        layer_names.push(name.clone());
    }
    Ok(DensityMatrix { values, layer_names })
}

/// JSON sidecar persisted next to the reference tensor.
#[derive(Debug, Serialize, Deserialize)]
pub struct IndexSidecar {
    pub layer_name: String,
    pub k: usize,
    pub subsample_fraction: f64,
    pub seed: u64,
    pub source_checksum: String,
}

pub fn tensor_checksum(m: &DenseMatrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.rows() as u64).to_le_bytes());
    hasher.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Persists the reference matrix as `<stem>.dact` plus `<stem>.json`.
pub fn save_index(index: &KnnIndex, stem: &Path) -> Result<()> {
    let tensor_path = stem.with_extension("dact");
    let json_path = stem.with_extension("json");
    save_tensor(&index.reference, &tensor_path)?;
    let sidecar = IndexSidecar {
        layer_name: index.layer_name.clone(),
        k: index.k,
        subsample_fraction: index.subsample_fraction,
        seed: index.seed,
        source_checksum: tensor_checksum(&index.reference),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| DacError::Format(e.to_string()))?;
    std::fs::write(json_path, json)?;
    Ok(())
}

pub fn load_index(stem: &Path) -> Result<KnnIndex> {
    let tensor_path = stem.with_extension("dact");
    let json_path = stem.with_extension("json");
    let reference = load_tensor(&tensor_path)?;
    let text = std::fs::read_to_string(&json_path)?;
    let sidecar: IndexSidecar =
        serde_json::from_str(&text).map_err(|e| DacError::Format(e.to_string()))?;
    let checksum = tensor_checksum(&reference);
    if checksum != sidecar.source_checksum {
        return Err(DacError::Data(format!(
            "{}: reference checksum mismatch",
            tensor_path.display()
        )));
    }
    if sidecar.k == 0 || sidecar.k > reference.rows() {
        return Err(DacError::Config(format!(
            "{}: k={} invalid for {} reference rows",
            json_path.display(),
            sidecar.k,
            reference.rows()
        )));
    }
    Ok(KnnIndex {
        layer_name: sidecar.layer_name,
        reference,
        k: sidecar.k,
        subsample_fraction: sidecar.subsample_fraction,
        seed: sidecar.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CalibrationDataset;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        DenseMatrix::new(rows, cols, data).unwrap()
    }

    /// Full-sort oracle sharing the distance kernel's summation order.
    fn brute_force_kth(reference: &DenseMatrix, queries: &DenseMatrix, k: usize) -> Vec<f64> {
        (0..queries.rows())
            .map(|r| {
                let mut d = distances_to_reference(reference, queries.row(r));
                d.sort_by(|a, b| a.total_cmp(b));
                d[k - 1]
            })
            .collect()
    }

    #[test]
    fn no_subsampling_keeps_all_rows() {
        let feats = random_matrix(20, 4, 1);
        let idx = build_index(&feats, "a", 3, 1.0, 0).unwrap();
        assert_eq!(idx.reference().rows(), 20);
        for r in 0..20 {
            assert!((row_norm(idx.reference().row(r)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn subsample_boundary() {
        let feats = random_matrix(1000, 3, 2);
        assert!(build_index(&feats, "a", 10, 0.01, 0).is_ok());
        assert!(matches!(
            build_index(&feats, "a", 10, 0.009, 0),
            Err(DacError::Config(_))
        ));
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let feats = random_matrix(500, 6, 3);
        let a = build_index(&feats, "a", 5, 0.2, 42).unwrap();
        let b = build_index(&feats, "a", 5, 0.2, 42).unwrap();
        assert_eq!(a.reference().data(), b.reference().data());
        let c = build_index(&feats, "a", 5, 0.2, 43).unwrap();
        assert_ne!(a.reference().data(), c.reference().data());
    }

    #[test]
    fn exact_match_distance_zero() {
        let reference = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let idx = KnnIndex {
            layer_name: "a".into(),
            reference,
            k: 1,
            subsample_fraction: 1.0,
            seed: 0,
        };
        let q = DenseMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(kth_distance(&idx, &q).unwrap(), vec![0.0]);
    }

    #[test]
    fn orthonormal_pair_distance() {
        let reference = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let idx = KnnIndex {
            layer_name: "a".into(),
            reference,
            k: 2,
            subsample_fraction: 1.0,
            seed: 0,
        };
        let q = DenseMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let d = kth_distance(&idx, &q).unwrap();
        assert!((d[0] - std::f64::consts::SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let reference_raw = random_matrix(200, 8, 7);
        let queries = l2_normalize_rows(&random_matrix(50, 8, 8));
        for &k in &[1usize, 5, 17] {
            let idx = build_index(&reference_raw, "a", k, 1.0, 0).unwrap();
            let got = kth_distance(&idx, &queries).unwrap();
            let want = brute_force_kth(idx.reference(), &queries, k);
            assert_eq!(got, want, "k={}", k);
        }
    }

    #[test]
    fn multi_k_matches_single_k() {
        let reference_raw = random_matrix(100, 5, 11);
        let queries = l2_normalize_rows(&random_matrix(20, 5, 12));
        let ks = [1usize, 3, 9];
        let idx = build_index(&reference_raw, "a", 1, 1.0, 0).unwrap();
        let multi = kth_distance_multi(&idx, &queries, &ks).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            let idx_k = build_index(&reference_raw, "a", k, 1.0, 0).unwrap();
            assert_eq!(multi[i], kth_distance(&idx_k, &queries).unwrap());
        }
    }

    #[test]
    fn monotone_in_k_and_bounded() {
        let reference_raw = random_matrix(100, 5, 9);
        let queries = l2_normalize_rows(&random_matrix(30, 5, 10));
        let mut prev: Option<Vec<f64>> = None;
        for k in 1..=20 {
            let idx = build_index(&reference_raw, "a", k, 1.0, 0).unwrap();
            let d = kth_distance(&idx, &queries).unwrap();
            assert!(d.iter().all(|&v| v <= 2.0 + 1e-6));
            if let Some(p) = prev {
                for (a, b) in p.iter().zip(&d) {
                    assert!(b >= a);
                }
            }
            prev = Some(d);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let idx = build_index(&random_matrix(10, 4, 0), "a", 2, 1.0, 0).unwrap();
        let q = random_matrix(3, 5, 1);
        assert!(matches!(kth_distance(&idx, &q), Err(DacError::Shape(_))));
    }

    fn dataset_with_layers(layers: Vec<(String, DenseMatrix)>) -> CalibrationDataset {
        let n = layers[0].1.rows();
        CalibrationDataset {
            split_name: "test".into(),
            labels: None,
            logits: DenseMatrix::zeros(n, 2),
            layers,
        }
    }

    #[test]
    fn density_profile_single_layer_matches_kth_distance() {
        let feats = random_matrix(40, 6, 20);
        let idx = build_index(&feats, "a", 3, 1.0, 0).unwrap();
        let ds = dataset_with_layers(vec![("a".into(), feats.clone())]);
        let profile = density_profile(&ds, &[idx.clone()]).unwrap();
        let direct = kth_distance(&idx, &l2_normalize_rows(&feats)).unwrap();
        for (r, &want) in direct.iter().enumerate() {
            assert_eq!(profile.values.get(r, 0), want as f32);
        }
        assert!(profile.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn density_profile_self_match_k1_all_zero() {
        let feats = random_matrix(25, 4, 21);
        let idx = build_index(&feats, "a", 1, 1.0, 0).unwrap();
        let ds = dataset_with_layers(vec![("a".into(), feats)]);
        let profile = density_profile(&ds, &[idx]).unwrap();
        assert!(profile.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn density_profile_layer_mismatch() {
        let feats = random_matrix(10, 3, 22);
        let idx = build_index(&feats, "b", 1, 1.0, 0).unwrap();
        let ds = dataset_with_layers(vec![("a".into(), feats)]);
        assert!(matches!(density_profile(&ds, &[idx]), Err(DacError::Config(_))));
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let feats = random_matrix(60, 5, 30);
        let idx = build_index(&feats, "layer3", 4, 0.5, 99).unwrap();
        let stem = dir.path().join("layer3");
        save_index(&idx, &stem).unwrap();
        let back = load_index(&stem).unwrap();
        assert_eq!(back.layer_name(), "layer3");
        assert_eq!(back.k(), 4);
        assert_eq!(back.seed(), 99);
        assert_eq!(back.reference().data(), idx.reference().data());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let reference_raw = random_matrix(150, 7, 40);
        let queries = l2_normalize_rows(&random_matrix(60, 7, 41));
        let idx = build_index(&reference_raw, "a", 9, 1.0, 0).unwrap();
        assert_eq!(
            kth_distance(&idx, &queries).unwrap(),
            kth_distance_seq(&idx, &queries).unwrap()
        );
    }
}
