//! Synthetic classifier-output generator with known ground truth.
//!
//! Features come from an isotropic Gaussian mixture with one component
//! per class, so the Bayes posterior is available in closed form. Logits
//! are a linear readout of the last-layer features multiplied by a
//! miscalibration temperature; shifted test splits add isotropic
//! Gaussian noise of the given severity; an OOD split draws from a
//! disjoint mixture. Earlier layers are fixed random linear projections
//! of the base features plus small independent noise, so every layer
//! carries shift signal of varying strength.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, LabelVector};
use crate::error::{DacError, Result};
use crate::tensor::DenseMatrix;

/// Noise std added to projected (non-final) layer features.
const LAYER_NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Feature dimension per layer; the last entry is the base feature
    /// dimension the mixture lives in.
    pub feature_dims: Vec<usize>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Distance of each class mean from the origin.
    pub class_mean_separation: f64,
    /// Noise std multipliers; non-decreasing, starting at 0.
    pub shift_severities: Vec<f64>,
    /// Logits are multiplied by this to simulate overconfidence.
    pub miscalibration_temperature: f64,
    /// Std of Gaussian noise added to the readout weights; a nonzero
    /// value makes the classifier imperfect the way a trained network
    /// is, with errors concentrated in low-density regions.
    pub readout_perturbation: f64,
    /// Fraction of samples drawn with feature-noise std inflated by
    /// `tail_scale`. The readout stays matched to the narrow component,
    /// so tail samples come out overconfident relative to their actual
    /// accuracy -- the way trained networks behave off-manifold -- and
    /// they sit in low-density regions, which is exactly the
    /// correlation the density-aware scaler exploits.
    #[serde(default)]
    pub tail_fraction: f64,
    /// Noise std multiplier of the tail component (>= 1).
    #[serde(default = "default_tail_scale")]
    pub tail_scale: f64,
    pub seed: u64,
}

fn default_tail_scale() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DacError::Config("need at least 2 classes".into()));
        }
        if self.feature_dims.is_empty() || self.feature_dims.iter().any(|&d| d == 0) {
            return Err(DacError::Config("feature_dims must be nonempty and positive".into()));
        }
        if self.shift_severities.first() != Some(&0.0) {
            return Err(DacError::Config("shift severities must start at 0".into()));
        }
        if self.shift_severities.windows(2).any(|w| w[0] > w[1]) {
            return Err(DacError::Config("shift severities must be non-decreasing".into()));
        }
        if self.train_samples < self.num_classes
            || self.val_samples < self.num_classes
            || self.test_samples < self.num_classes
        {
            return Err(DacError::Config("split sizes must be at least num_classes".into()));
        }
        if self.miscalibration_temperature <= 0.0 {
            return Err(DacError::Config("miscalibration temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tail_fraction) {
            return Err(DacError::Config("tail fraction must be in [0, 1)".into()));
        }
        if self.tail_scale < 1.0 {
            return Err(DacError::Config("tail scale must be at least 1".into()));
        }
        Ok(())
    }

    /// The stock desk-scale benchmark: 10 classes, three layers, five
    /// severity levels, overconfident logits (x3), and a mildly
    /// imperfect readout so classification errors concentrate in
    /// low-density regions.
    ///
    /// The separation is large relative to the unit feature noise so
    /// in-domain kth-NN distances stay well below the orthogonality
    /// plateau of the unit sphere, leaving headroom for shifted splits
    /// to register as low density. The tail scale is matched to the top
    /// severity (noise std 4 vs sqrt(1 + 4^2)), which anchors the
    /// fitted density-to-scale slope at the far end of the density
    /// range the shifted splits occupy.
    pub fn default_benchmark(seed: u64) -> Self {
        SynthConfig {
            num_classes: 10,
            feature_dims: vec![16, 24, 32],
            train_samples: 6000,
            val_samples: 2000,
            test_samples: 5000,
            class_mean_separation: 8.0,
            shift_severities: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            miscalibration_temperature: 3.0,
            readout_perturbation: 0.3,
            tail_fraction: 0.15,
            tail_scale: 4.0,
            seed,
        }
    }

    /// Per-layer kNN neighbor count the stock benchmark is designed
    /// around.
    pub const BENCHMARK_K: usize = 10;
}

/// Frozen mixture parameters derived from a config.
pub struct SynthBenchmark {
    pub config: SynthConfig,
    /// `C x D` class means of the in-domain mixture.
    class_means: Vec<Vec<f64>>,
    /// Disjoint mixture means for the OOD split.
    ood_means: Vec<Vec<f64>>,
    /// Linear readout rows (perturbed means) and biases.
    readout: Vec<Vec<f64>>,
    readout_bias: Vec<f64>,
    /// Per non-final layer: `D x D_l` projection.
    projections: Vec<Vec<Vec<f64>>>,
}

fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl SynthBenchmark {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let dim = *config.feature_dims.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a("mixture"));
        let sep = config.class_mean_separation;
        let class_means: Vec<Vec<f64>> = (0..config.num_classes)
            .map(|_| random_unit(&mut rng, dim).into_iter().map(|x| x * sep).collect())
            .collect();
        let ood_means: Vec<Vec<f64>> = (0..config.num_classes)
            .map(|_| {
                random_unit(&mut rng, dim)
                    .into_iter()
                    .map(|x| x * 2.5 * sep)
                    .collect()
            })
            .collect();
        let mut readout = Vec::with_capacity(config.num_classes);
        let mut readout_bias = Vec::with_capacity(config.num_classes);
        for mean in &class_means {
            let row: Vec<f64> = mean
                .iter()
                .map(|&m| m + config.readout_perturbation * normal(&mut rng))
                .collect();
            let sq: f64 = row.iter().map(|x| x * x).sum();
            readout_bias.push(-0.5 * sq);
            readout.push(row);
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let projections: Vec<Vec<Vec<f64>>> = config.feature_dims[..config.feature_dims.len() - 1]
            .iter()
            .map(|&d_l| {
                (0..dim)
                    .map(|_| {
                        (0..d_l)
                            .map(|_| scale * normal(&mut rng))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            class_means,
            ood_means,
            readout,
            readout_bias,
            projections,
        })
    }

    fn layer_names(&self) -> Vec<String> {
        (0..self.config.feature_dims.len())
            .map(|i| format!("layer{}", i))
            .collect()
    }

    fn make_split(
        &self,
        name: &str,
        samples: usize,
        severity: f64,
        means: &[Vec<f64>],
        labeled: bool,
    ) -> CalibrationDataset {
        let cfg = &self.config;
        let dim = *cfg.feature_dims.last().unwrap();
        let c = cfg.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(name));

        let mut labels = Vec::with_capacity(samples);
        let mut base = Vec::with_capacity(samples);
        for _ in 0..samples {
            let y = rng.random_range(0..c);
            labels.push(y as u32);
            let noise_scale = if cfg.tail_fraction > 0.0
                && rng.random_range(0.0..1.0) < cfg.tail_fraction
            {
                cfg.tail_scale
            } else {
                1.0
            };
            let mut x: Vec<f64> = means[y]
                .iter()
                .map(|&m| m + noise_scale * normal(&mut rng))
                .collect();
            if severity > 0.0 {
                for v in &mut x {
                    *v += severity * normal(&mut rng);
                }
            }
            base.push(x);
        }

        let mut logits = DenseMatrix::zeros(samples, c);
        for (n, x) in base.iter().enumerate() {
            for ci in 0..c {
                let dot: f64 = self.readout[ci].iter().zip(x).map(|(w, v)| w * v).sum();
                logits.set(
                    n,
                    ci,
                    (cfg.miscalibration_temperature * (dot + self.readout_bias[ci])) as f32,
                );
            }
        }

        let mut layers = Vec::with_capacity(cfg.feature_dims.len());
        let names = self.layer_names();
        for (li, &d_l) in cfg.feature_dims[..cfg.feature_dims.len() - 1].iter().enumerate() {
            let proj = &self.projections[li];
            let mut feats = DenseMatrix::zeros(samples, d_l);
            for (n, x) in base.iter().enumerate() {
                for j in 0..d_l {
                    let mut v = 0.0f64;
                    for (i, &xi) in x.iter().enumerate() {
                        v += proj[i][j] * xi;
                    }
                    v += LAYER_NOISE_STD * normal(&mut rng);
                    feats.set(n, j, v as f32);
                }
            }
            layers.push((names[li].clone(), feats));
        }
        let mut last = DenseMatrix::zeros(samples, dim);
        for (n, x) in base.iter().enumerate() {
            for (j, &xi) in x.iter().enumerate() {
                last.set(n, j, xi as f32);
            }
        }
        layers.push((names[cfg.feature_dims.len() - 1].clone(), last));

        CalibrationDataset {
            split_name: name.to_string(),
            labels: if labeled {
                Some(LabelVector::new(labels, c).expect("labels in range"))
            } else {
                None
            },
            logits,
            layers,
        }
    }

    /// Split name for severity index `i` in the config's severity list.
    pub fn severity_split_name(i: usize) -> String {
        format!("severity_{}", i)
    }

    /// Generates every split: train/val/test, one shifted test split per
    /// severity, and an unlabeled OOD split from the disjoint mixture.
    pub fn generate(&self) -> BTreeMap<String, CalibrationDataset> {
        let cfg = &self.config;
        let mut out = BTreeMap::new();
        out.insert(
            "train".to_string(),
            self.make_split("train", cfg.train_samples, 0.0, &self.class_means, true),
        );
        out.insert(
            "val".to_string(),
            self.make_split("val", cfg.val_samples, 0.0, &self.class_means, true),
        );
        out.insert(
            "test".to_string(),
            self.make_split("test", cfg.test_samples, 0.0, &self.class_means, true),
        );
        for (i, &s) in cfg.shift_severities.iter().enumerate() {
            let name = Self::severity_split_name(i);
            out.insert(
                name.clone(),
                self.make_split(&name, cfg.test_samples, s, &self.class_means, true),
            );
        }
        out.insert(
            "ood".to_string(),
            self.make_split("ood", cfg.test_samples, 0.0, &self.ood_means, false),
        );
        out
    }

    /// Exact top-class posterior probability of each row under the
    /// in-domain generating mixture (equal priors, unit covariance).
    pub fn bayes_confidence(&self, features: &DenseMatrix) -> Vec<f64> {
        let c = self.config.num_classes;
        (0..features.rows())
            .map(|r| {
                let x = features.row(r);
                let logps: Vec<f64> = (0..c)
                    .map(|ci| {
                        let mean = &self.class_means[ci];
                        let dot: f64 = mean.iter().zip(x).map(|(&m, &v)| m * v as f64).sum();
                        let sq: f64 = mean.iter().map(|&m| m * m).sum();
                        dot - 0.5 * sq
                    })
                    .collect();
                let max = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logps.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.into_iter().fold(0.0f64, f64::max) / sum
            })
            .collect()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }
}

/// Convenience wrapper: build the benchmark and generate all splits.
pub fn generate(config: SynthConfig) -> Result<BTreeMap<String, CalibrationDataset>> {
    Ok(SynthBenchmark::new(config)?.generate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::fit_ts;
    use crate::knn::{build_index, kth_distance};
    use crate::metrics::ece_equal_width;
    use crate::ops::{l2_normalize_rows, softmax_rows};

    fn config(seed: u64) -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            feature_dims: vec![6, 8],
            train_samples: 400,
            val_samples: 300,
            test_samples: 300,
            class_mean_separation: 3.0,
            shift_severities: vec![0.0, 1.0, 2.0, 3.0],
            miscalibration_temperature: 1.0,
            readout_perturbation: 0.0,
            tail_fraction: 0.0,
            tail_scale: 1.0,
            seed,
        }
    }

    #[test]
    fn deterministic_generation() {
        let a = generate(config(7)).unwrap();
        let b = generate(config(7)).unwrap();
        for (name, ds) in &a {
            let other = &b[name];
            assert_eq!(ds.logits.data(), other.logits.data(), "{}", name);
            for ((_, fa), (_, fb)) in ds.layers.iter().zip(&other.layers) {
                assert_eq!(fa.data(), fb.data(), "{}", name);
            }
        }
        let c = generate(SynthConfig { seed: 8, ..config(7) }).unwrap();
        assert_ne!(a["test"].logits.data(), c["test"].logits.data());
    }

    #[test]
    fn splits_validate_and_share_layer_names() {
        let splits = generate(config(1)).unwrap();
        let names: Vec<String> = splits["train"].layer_names().iter().map(|s| s.to_string()).collect();
        for ds in splits.values() {
            ds.validate().unwrap();
            assert_eq!(
                ds.layer_names().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                names
            );
        }
        assert!(splits["ood"].labels.is_none());
        assert!(splits["test"].labels.is_some());
    }

    #[test]
    fn unit_temperature_logits_are_calibrated() {
        let mut cfg = config(2);
        cfg.test_samples = 2000;
        cfg.val_samples = 2000;
        let bench = SynthBenchmark::new(cfg).unwrap();
        let splits = bench.generate();
        let test = &splits["test"];
        let ts = fit_ts(&test.logits, test.labels.as_ref().unwrap()).unwrap();
        assert!((ts.temperature - 1.0).abs() < 0.05, "T = {}", ts.temperature);
        let probs = softmax_rows(&test.logits);
        let (ece, _) = ece_equal_width(&probs, test.labels.as_ref().unwrap(), 15).unwrap();
        assert!(ece < 0.02, "ece = {}", ece);
    }

    #[test]
    fn miscalibration_temperature_recovered_by_ts() {
        let mut cfg = config(3);
        cfg.miscalibration_temperature = 3.0;
        cfg.val_samples = 2000;
        let splits = generate(cfg).unwrap();
        let val = &splits["val"];
        let ts = fit_ts(&val.logits, val.labels.as_ref().unwrap()).unwrap();
        assert!((ts.temperature - 3.0).abs() < 0.2, "T = {}", ts.temperature);
    }

    #[test]
    fn shift_increases_knn_distance() {
        let mut wins = 0;
        for seed in 0..10 {
            let splits = generate(config(100 + seed)).unwrap();
            let (_, train_last) = splits["train"].layers.last().unwrap().clone();
            let idx = build_index(&train_last, "layerN", 10, 1.0, 0).unwrap();
            let mean_dist = |split: &str| {
                let (_, feats) = splits[split].layers.last().unwrap();
                let d = kth_distance(&idx, &l2_normalize_rows(feats)).unwrap();
                d.iter().sum::<f64>() / d.len() as f64
            };
            if mean_dist("severity_3") > mean_dist("severity_0") {
                wins += 1;
            }
        }
        assert!(wins >= 9, "only {}/10 seeds showed larger shifted distances", wins);
    }

    #[test]
    fn accuracy_non_increasing_in_severity() {
        let mut votes = 0i32;
        for seed in 0..5 {
            let splits = generate(config(200 + seed)).unwrap();
            let accuracy = |split: &str| {
                let ds = &splits[split];
                let labels = ds.labels.as_ref().unwrap();
                let hits = (0..ds.num_samples())
                    .filter(|&r| ds.logits.row_argmax(r) == labels.get(r) as usize)
                    .count();
                hits as f64 / ds.num_samples() as f64
            };
            let accs: Vec<f64> = (0..4)
                .map(|i| accuracy(&SynthBenchmark::severity_split_name(i)))
                .collect();
            let monotone = accs.windows(2).all(|w| w[1] <= w[0] + 0.02);
            votes += if monotone { 1 } else { -1 };
        }
        assert!(votes > 0, "accuracy not monotone in severity for most seeds");
    }

    #[test]
    fn bayes_confidence_extremes() {
        let bench = SynthBenchmark::new(config(5)).unwrap();
        let dim = bench.config.feature_dims[1];
        let mean0: Vec<f32> = bench.class_means()[0].iter().map(|&v| v as f32).collect();
        let at_mean = DenseMatrix::from_rows(&[mean0]).unwrap();
        let conf = bench.bayes_confidence(&at_mean);
        assert!(conf[0] > 0.9, "confidence at class mean {}", conf[0]);

        // equidistant point between two means for a 2-class mixture
        let mut cfg = config(6);
        cfg.num_classes = 2;
        let bench2 = SynthBenchmark::new(cfg).unwrap();
        let mid: Vec<f32> = (0..dim)
            .map(|j| 0.5 * (bench2.class_means()[0][j] + bench2.class_means()[1][j]) as f32)
            .collect();
        let conf = bench2.bayes_confidence(&DenseMatrix::from_rows(&[mid]).unwrap());
        assert!((conf[0] - 0.5).abs() < 1e-6, "midpoint confidence {}", conf[0]);
    }

    #[test]
    fn bayes_confidence_matches_density_oracle_in_1d() {
        let cfg = SynthConfig {
            num_classes: 2,
            feature_dims: vec![1],
            train_samples: 10,
            val_samples: 10,
            test_samples: 10,
            class_mean_separation: 1.5,
            shift_severities: vec![0.0],
            miscalibration_temperature: 1.0,
            readout_perturbation: 0.0,
            tail_fraction: 0.0,
            tail_scale: 1.0,
            seed: 11,
        };
        let bench = SynthBenchmark::new(cfg).unwrap();
        let xs: Vec<Vec<f32>> = (-10..=10).map(|i| vec![i as f32 * 0.3]).collect();
        let m = DenseMatrix::from_rows(&xs).unwrap();
        let got = bench.bayes_confidence(&m);
        // independent route through the Gaussian densities themselves
        let density = |x: f64, mu: f64| (-(x - mu) * (x - mu) / 2.0).exp();
        for (row, conf) in xs.iter().zip(got) {
            let x = row[0] as f64;
            let p0 = density(x, bench.class_means()[0][0]);
            let p1 = density(x, bench.class_means()[1][0]);
            let want = p0.max(p1) / (p0 + p1);
            assert!((conf - want).abs() < 1e-9, "x={} got {} want {}", x, conf, want);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = config(0);
        cfg.shift_severities = vec![1.0, 2.0];
        assert!(SynthBenchmark::new(cfg).is_err());
        let mut cfg = config(0);
        cfg.shift_severities = vec![0.0, 2.0, 1.0];
        assert!(SynthBenchmark::new(cfg).is_err());
        let mut cfg = config(0);
        cfg.num_classes = 1;
        assert!(SynthBenchmark::new(cfg).is_err());
    }
}
