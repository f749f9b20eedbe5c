//! Command-line surface: index building, calibrator fitting, split
//! calibration, metric evaluation, OOD scoring, k sweeps, validation
//! data-efficiency runs, layer-weight reports, and synthetic benchmark
//! generation.
//!
//! Reports are byte-deterministic for a fixed manifest and seed;
//! timestamps live only in the separate `run_metadata.json`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;

use dac::baselines::{compose, CalibratorFile, MethodSpec};
use dac::dataset::CalibrationDataset;
use dac::error::{DacError, Result};
use dac::knn::{build_index, load_index, save_index, tensor_checksum, KnnIndex};
use dac::manifest::{write_split, ExperimentManifest};
use dac::metrics::OodScores;
use dac::report::{
    eval_rows_to_csv, evaluate_model, ood_report, ood_report_to_csv, reliability_to_csv,
    EvalRow,
};
use dac::scaler::FitReport;
use dac::synth::{SynthBenchmark, SynthConfig};
use dac::tensor::save_tensor;

/// Fallback k when neither the manifest nor a flag provides one.
const DEFAULT_K: usize = 50;
const DEFAULT_BINS: usize = 15;

#[derive(Parser)]
#[command(
    name = "dac",
    about = "Density-aware calibration toolkit",
    version,
    max_term_width = 100
)]
struct Cli {
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Treat numeric non-convergence as a failure (exit code 4)
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist one kNN index per layer from the train split
    BuildIndex {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving <layer>.dact + <layer>.json per layer
        #[arg(long)]
        out: PathBuf,
        /// Override k for every layer
        #[arg(long)]
        k: Option<usize>,
        /// Override the manifest's reference subsample fraction
        #[arg(long)]
        subsample: Option<f64>,
    },
    /// Fit a calibrator (method grammar: <base>[+dac], base in
    /// {ts, ets, irm, ir, none}) on the validation split
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: String,
        /// Directory of persisted indices; built in memory when omitted
        #[arg(long)]
        index_dir: Option<PathBuf>,
        /// Output model JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a fitted model to a split and write calibrated
    /// probabilities as a tensor file
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        index_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fitted model over labeled splits: metric CSV/JSON
    /// plus reliability tables
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Splits to evaluate (default: every labeled split)
        #[arg(long, value_delimiter = ',')]
        splits: Vec<String>,
        #[arg(long)]
        index_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// OOD battery (FPR@95TPR, detection error, AUROC, AUPR-In/Out) on
    /// top-class confidences
    Ood {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        in_split: String,
        #[arg(long, default_value = "ood")]
        ood_split: String,
        #[arg(long)]
        index_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild indices and refit per k; emits a per-k macro-metric table
    KSweep {
        #[arg(long)]
        manifest: PathBuf,
        /// k values to sweep
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, default_value = "ts+dac")]
        method: String,
        /// Splits to evaluate (default: every labeled split except
        /// train and val)
        #[arg(long, value_delimiter = ',')]
        splits: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refit on random validation subsets per fraction/repeat; emits
    /// per-run and mean/spread tables
    DataEfficiency {
        #[arg(long)]
        manifest: PathBuf,
        /// Validation fractions in (0, 1]
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Subsampling seed (default: manifest seed)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ts+dac")]
        method: String,
        #[arg(long, value_delimiter = ',')]
        splits: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the layer-weight share table of a fitted model
    ReportLayers {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic benchmark: tensors plus a manifest
    Synth {
        /// JSON config; the stock benchmark when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DAC_LOG")).init();
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("could not configure thread pool: {}", e);
        }
    }
    #[cfg(not(feature = "parallel"))]
    if cli.threads.is_some() {
        log::warn!("--threads ignored: built without the parallel feature");
    }
    let strict = cli.strict;
    match run(cli.command, strict) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}

/// Seed-deterministic FNV-1a, used to derive per-run seed streams.
fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_metadata(dir: &Path, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({ "command": command, "timestamp_unix_secs": ts });
    std::fs::write(
        dir.join("run_metadata.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| DacError::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn k_for_layer(manifest: &ExperimentManifest, layer_idx: usize, k_override: Option<usize>) -> usize {
    k_override
        .or_else(|| manifest.k_per_layer.as_ref().map(|ks| ks[layer_idx]))
        .unwrap_or(DEFAULT_K)
}

/// Builds all per-layer indices from the train split in memory.
fn build_indices(
    manifest: &ExperimentManifest,
    base: &Path,
    k_override: Option<usize>,
    subsample_override: Option<f64>,
) -> Result<Vec<KnnIndex>> {
    let train = manifest.load_split(base, "train")?;
    let fraction = subsample_override.unwrap_or(manifest.subsample_fraction);
    let mut indices = Vec::with_capacity(train.layers.len());
    for (i, (name, features)) in train.layers.iter().enumerate() {
        let k = k_for_layer(manifest, i, k_override);
        indices.push(build_index(features, name, k, fraction, manifest.seed)?);
    }
    Ok(indices)
}

fn load_indices(manifest: &ExperimentManifest, dir: &Path) -> Result<Vec<KnnIndex>> {
    manifest
        .layer_names
        .iter()
        .map(|name| load_index(&dir.join(name)))
        .collect()
}

/// Indices for a model that needs them: loaded from `--index-dir` when
/// given, otherwise rebuilt from the train split.
fn indices_for(
    manifest: &ExperimentManifest,
    base: &Path,
    index_dir: &Option<PathBuf>,
    needed: bool,
) -> Result<Option<Vec<KnnIndex>>> {
    if !needed {
        return Ok(None);
    }
    let indices = match index_dir {
        Some(dir) => load_indices(manifest, dir)?,
        None => build_indices(manifest, base, None, None)?,
    };
    Ok(Some(indices))
}

/// Exit code 4 when a fit failed to converge and --strict is set.
fn convergence_code(report: Option<&FitReport>, strict: bool) -> i32 {
    match report {
        Some(r) if !r.converged => {
            log::warn!(
                "scaler fit did not converge after {} iterations (final loss {})",
                r.iterations,
                r.final_loss
            );
            if strict {
                4
            } else {
                0
            }
        }
        _ => 0,
    }
}

fn fit_method(
    manifest: &ExperimentManifest,
    base_dir: &Path,
    method: &MethodSpec,
    indices: Option<&[KnnIndex]>,
) -> Result<CalibratorFile> {
    let val = manifest.load_split(base_dir, "val")?;
    let (model, report) = compose(method.base, indices, &val)?;
    let index_checksums = indices
        .map(|ix| ix.iter().map(|i| tensor_checksum(i.reference())).collect())
        .unwrap_or_default();
    Ok(CalibratorFile {
        method: method.to_string(),
        model,
        index_checksums,
        fit_report: report,
    })
}

/// Labeled splits to evaluate: the explicit list, or every labeled
/// split (minus exclusions) in manifest order.
fn eval_splits(
    manifest: &ExperimentManifest,
    base: &Path,
    requested: &[String],
    exclude: &[&str],
) -> Result<Vec<CalibrationDataset>> {
    let names: Vec<String> = if requested.is_empty() {
        manifest
            .splits
            .iter()
            .filter(|s| s.labels.is_some() && !exclude.contains(&s.name.as_str()))
            .map(|s| s.name.clone())
            .collect()
    } else {
        requested.to_vec()
    };
    if names.is_empty() {
        return Err(DacError::Config("no labeled splits to evaluate".into()));
    }
    names
        .iter()
        .map(|name| manifest.load_split(base, name))
        .collect()
}

fn write_eval_outputs(
    out: &Path,
    rows: &[EvalRow],
    reliability: &[(String, dac::metrics::BinStats)],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), eval_rows_to_csv(rows))?;
    let json = serde_json::to_string_pretty(rows).map_err(|e| DacError::Format(e.to_string()))?;
    std::fs::write(out.join("metrics.json"), json)?;
    for (split, stats) in reliability {
        std::fs::write(
            out.join(format!("reliability_{}.csv", split)),
            reliability_to_csv(stats),
        )?;
    }
    Ok(())
}

fn run(command: Command, strict: bool) -> Result<i32> {
    match command {
        Command::BuildIndex {
            manifest,
            out,
            k,
            subsample,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let indices = build_indices(&m, &base, k, subsample)?;
            std::fs::create_dir_all(&out)?;
            for index in &indices {
                save_index(index, &out.join(index.layer_name()))?;
            }
            write_metadata(&out, "build-index")?;
            Ok(0)
        }
        Command::Fit {
            manifest,
            method,
            index_dir,
            out,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let spec: MethodSpec = method.parse()?;
            let indices = indices_for(&m, &base, &index_dir, spec.use_dac)?;
            let file = fit_method(&m, &base, &spec, indices.as_deref())?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            file.save(&out)?;
            Ok(convergence_code(file.fit_report.as_ref(), strict))
        }
        Command::Calibrate {
            manifest,
            model,
            split,
            index_dir,
            out,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let file = CalibratorFile::load(&model)?;
            let indices = indices_for(&m, &base, &index_dir, file.model.dac.is_some())?;
            let dataset = m.load_split(&base, &split)?;
            let probs = file.model.apply(&dataset, indices.as_deref())?;
            save_tensor(&probs, &out)?;
            Ok(0)
        }
        Command::Evaluate {
            manifest,
            model,
            splits,
            index_dir,
            bins,
            out,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let file = CalibratorFile::load(&model)?;
            let indices = indices_for(&m, &base, &index_dir, file.model.dac.is_some())?;
            let datasets = eval_splits(&m, &base, &splits, &[])?;
            let (rows, reliability) =
                evaluate_model(&file.model, &datasets, indices.as_deref(), bins)?;
            write_eval_outputs(&out, &rows, &reliability)?;
            write_metadata(&out, "evaluate")?;
            Ok(0)
        }
        Command::Ood {
            manifest,
            model,
            in_split,
            ood_split,
            index_dir,
            out,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let file = CalibratorFile::load(&model)?;
            let indices = indices_for(&m, &base, &index_dir, file.model.dac.is_some())?;
            let in_ds = m.load_split(&base, &in_split)?;
            let ood_ds = m.load_split(&base, &ood_split)?;
            let in_probs = file.model.apply(&in_ds, indices.as_deref())?;
            let ood_probs = file.model.apply(&ood_ds, indices.as_deref())?;
            let scores = OodScores::new(
                OodScores::confidences(&in_probs),
                OodScores::confidences(&ood_probs),
            )?;
            let report = ood_report(&scores)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ood.csv"), ood_report_to_csv(&report))?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| DacError::Format(e.to_string()))?;
            std::fs::write(out.join("ood.json"), json)?;
            write_metadata(&out, "ood")?;
            Ok(0)
        }
        Command::KSweep {
            manifest,
            k,
            method,
            splits,
            bins,
            out,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let spec: MethodSpec = method.parse()?;
            if !spec.use_dac {
                return Err(DacError::Config(format!(
                    "k sweep requires a +dac method, got {:?}",
                    method
                )));
            }
            let mut ks = k;
            ks.sort_unstable();
            ks.dedup();
            let datasets = eval_splits(&m, &base, &splits, &["train", "val"])?;

            let mut csv = String::from("method,k,split,metric,value\n");
            // base-only reference line first
            let base_spec = MethodSpec {
                base: spec.base,
                use_dac: false,
            };
            let base_fit = fit_method(&m, &base, &base_spec, None)?;
            let (base_rows, _) = evaluate_model(&base_fit.model, &datasets, None, bins)?;
            for row in &base_rows {
                csv.push_str(&format!(
                    "{},,{},{},{}\n",
                    base_spec, row.split, row.metric, row.value
                ));
            }
            let mut worst_report: Option<FitReport> = None;
            for &kv in &ks {
                let indices = build_indices(&m, &base, Some(kv), None)?;
                let file = fit_method(&m, &base, &spec, Some(&indices))?;
                let (rows, _) =
                    evaluate_model(&file.model, &datasets, Some(&indices), bins)?;
                for row in &rows {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        spec, kv, row.split, row.metric, row.value
                    ));
                }
                if let Some(r) = file.fit_report {
                    if !r.converged {
                        worst_report = Some(r);
                    }
                }
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("k_sweep.csv"), csv)?;
            write_metadata(&out, "k-sweep")?;
            Ok(convergence_code(worst_report.as_ref(), strict))
        }
        Command::DataEfficiency {
            manifest,
            fractions,
            repeats,
            seed,
            method,
            splits,
            bins,
            out,
        } => {
            let (m, base) = ExperimentManifest::load(&manifest)?;
            let spec: MethodSpec = method.parse()?;
            if repeats == 0 {
                return Err(DacError::Config("repeats must be positive".into()));
            }
            let val = m.load_split(&base, "val")?;
            let n_val = val.num_samples();
            for &f in &fractions {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(DacError::Config(format!("fraction {} outside (0, 1]", f)));
                }
                if (((n_val as f64) * f).floor() as usize) < 2 {
                    return Err(DacError::Config(format!(
                        "fraction {} leaves fewer than 2 of {} validation samples",
                        f, n_val
                    )));
                }
            }
            let indices = indices_for(&m, &base, &None, spec.use_dac)?;
            let datasets = eval_splits(&m, &base, &splits, &["train", "val"])?;
            let run_seed = seed.unwrap_or(m.seed);

            let mut csv = String::from("fraction,repeat,metric,value\n");
            let mut summary = String::from("fraction,metric,mean,std\n");
            let mut worst_report: Option<FitReport> = None;
            for &fraction in &fractions {
                let take = ((n_val as f64) * fraction).floor() as usize;
                let mut per_metric: std::collections::BTreeMap<String, Vec<f64>> =
                    Default::default();
                for repeat in 0..repeats {
                    let stream = run_seed
                        ^ fnv1a(&format!("data-efficiency/{}/{}", fraction, repeat));
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream);
                    let rows: Vec<usize> = if take == n_val {
                        (0..n_val).collect()
                    } else {
                        let mut idx =
                            rand::seq::index::sample(&mut rng, n_val, take).into_vec();
                        idx.sort_unstable();
                        idx
                    };
                    let sub = val.subset(&rows)?;
                    let (model, report) = compose(spec.base, indices.as_deref(), &sub)?;
                    if let Some(r) = report {
                        if !r.converged {
                            worst_report = Some(r);
                        }
                    }
                    let (eval_rows, _) =
                        evaluate_model(&model, &datasets, indices.as_deref(), bins)?;
                    for row in eval_rows.iter().filter(|r| r.split == "macro") {
                        per_metric
                            .entry(row.metric.clone())
                            .or_default()
                            .push(row.value);
                        csv.push_str(&format!(
                            "{},{},{},{}\n",
                            fraction, repeat, row.metric, row.value
                        ));
                    }
                }
                for (metric, values) in &per_metric {
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    let var = if values.len() > 1 {
                        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / (values.len() - 1) as f64
                    } else {
                        0.0
                    };
                    summary.push_str(&format!(
                        "{},{},{},{}\n",
                        fraction,
                        metric,
                        mean,
                        var.sqrt()
                    ));
                }
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("data_efficiency.csv"), csv)?;
            std::fs::write(out.join("data_efficiency_summary.csv"), summary)?;
            write_metadata(&out, "data-efficiency")?;
            Ok(convergence_code(worst_report.as_ref(), strict))
        }
        Command::ReportLayers { model, out } => {
            let file = CalibratorFile::load(&model)?;
            let mut csv = String::from("layer,weight,share\n");
            match &file.model.dac {
                Some(dac) => {
                    let total: f64 = dac.weights.iter().sum::<f64>() + dac.bias;
                    for (name, &w) in dac.layer_names.iter().zip(&dac.weights) {
                        csv.push_str(&format!("{},{},{}\n", name, w, w / total));
                    }
                    csv.push_str(&format!("bias,{},{}\n", dac.bias, dac.bias / total));
                }
                None => {
                    return Err(DacError::Config(
                        "model has no density-aware scaler; no layer weights to report".into(),
                    ))
                }
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, csv)?;
            Ok(0)
        }
        Command::Synth { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        DacError::Config(format!("cannot read config {}: {}", path.display(), e))
                    })?;
                    serde_json::from_str::<SynthConfig>(&text)
                        .map_err(|e| DacError::Config(format!("{}: {}", path.display(), e)))?
                }
                None => SynthConfig::default_benchmark(0),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let bench = SynthBenchmark::new(cfg.clone())?;
            let datasets = bench.generate();
            std::fs::create_dir_all(&out)?;
            let mut records = Vec::with_capacity(datasets.len());
            for dataset in datasets.values() {
                records.push(write_split(dataset, &out)?);
            }
            let layer_names: Vec<String> = datasets
                .values()
                .next()
                .expect("generator emits splits")
                .layer_names()
                .iter()
                .map(|s| s.to_string())
                .collect();
            let manifest = ExperimentManifest {
                num_classes: cfg.num_classes,
                layer_names: layer_names.clone(),
                k_per_layer: Some(vec![SynthConfig::BENCHMARK_K; layer_names.len()]),
                subsample_fraction: 1.0,
                seed: cfg.seed,
                methods: vec!["ts".into(), "ts+dac".into()],
                splits: records,
            };
            manifest.save(&out.join("manifest.json"))?;
            write_metadata(&out, "synth")?;
            Ok(0)
        }
    }
}
