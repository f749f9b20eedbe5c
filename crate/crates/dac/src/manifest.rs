//! The experiment manifest: a JSON document naming splits and their
//! tensor files, keyed by layer name. Paths are relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, LabelVector};
use crate::error::{DacError, Result};
use crate::tensor::{load_tensor, save_tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: String,
    pub logits: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub layers: BTreeMap<String, String>,
}

fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub num_classes: usize,
    /// Layer order used everywhere downstream.
    pub layer_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_per_layer: Option<Vec<usize>>,
    #[serde(default = "default_fraction")]
    pub subsample_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub methods: Vec<String>,
    pub splits: Vec<SplitRecord>,
}

impl ExperimentManifest {
    /// Loads a manifest and returns it with its base directory (the
    /// anchor for all relative paths inside).
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DacError::Config(format!("cannot read manifest {}: {}", path.display(), e))
        })?;
        let manifest: ExperimentManifest = serde_json::from_str(&text)
            .map_err(|e| DacError::Config(format!("manifest {}: {}", path.display(), e)))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate(&base)?;
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| DacError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.num_classes == 0 {
            return Err(DacError::Config("manifest: num_classes must be positive".into()));
        }
        if let Some(ks) = &self.k_per_layer {
            if ks.len() != self.layer_names.len() {
                return Err(DacError::Config(format!(
                    "manifest: {} k values for {} layers",
                    ks.len(),
                    self.layer_names.len()
                )));
            }
        }
        let mut seen_split = std::collections::HashSet::new();
        for split in &self.splits {
            if !seen_split.insert(split.name.as_str()) {
                return Err(DacError::Config(format!(
                    "manifest: duplicate split {}",
                    split.name
                )));
            }
            let mut keys: Vec<&String> = split.layers.keys().collect();
            keys.sort();
            let mut want: Vec<&String> = self.layer_names.iter().collect();
            want.sort();
            if keys != want {
                return Err(DacError::Config(format!(
                    "manifest: split {} layer keys {:?} do not match layer_names {:?}",
                    split.name, keys, self.layer_names
                )));
            }
            let mut paths: Vec<&String> = vec![&split.logits];
            if let Some(l) = &split.labels {
                paths.push(l);
            }
            paths.extend(split.layers.values());
            for rel in paths {
                let p = base.join(rel);
                if !p.exists() {
                    return Err(DacError::Config(format!(
                        "manifest: split {} references missing file {}",
                        split.name,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&SplitRecord> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| DacError::Config(format!("manifest has no split {:?}", name)))
    }

    /// Loads one split's tensors into a validated dataset, layers in
    /// manifest order.
    pub fn load_split(&self, base: &Path, name: &str) -> Result<CalibrationDataset> {
        let record = self.split(name)?;
        let logits = load_tensor(&base.join(&record.logits))?;
        let labels = match &record.labels {
            Some(rel) => Some(LabelVector::from_matrix(
                &load_tensor(&base.join(rel))?,
                self.num_classes,
            )?),
            None => None,
        };
        let mut layers = Vec::with_capacity(self.layer_names.len());
        for layer in &self.layer_names {
            let rel = record.layers.get(layer).expect("validated");
            layers.push((layer.clone(), load_tensor(&base.join(rel))?));
        }
        let dataset = CalibrationDataset {
            split_name: name.to_string(),
            labels,
            logits,
            layers,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

/// Writes one dataset's tensors under `dir` with a `<split>_` prefix
/// and returns the matching manifest record (paths relative to `dir`).
pub fn write_split(dataset: &CalibrationDataset, dir: &Path) -> Result<SplitRecord> {
    let prefix = &dataset.split_name;
    let logits_rel = format!("{}_logits.dact", prefix);
    save_tensor(&dataset.logits, &dir.join(&logits_rel))?;
    let labels_rel = match &dataset.labels {
        Some(labels) => {
            let rel = format!("{}_labels.dact", prefix);
            save_tensor(&labels.to_matrix(), &dir.join(&rel))?;
            Some(rel)
        }
        None => None,
    };
    let mut layers = BTreeMap::new();
    for (name, feats) in &dataset.layers {
        let rel = format!("{}_{}.dact", prefix, name);
        save_tensor(feats, &dir.join(&rel))?;
        layers.insert(name.clone(), rel);
    }
    Ok(SplitRecord {
        name: dataset.split_name.clone(),
        logits: logits_rel,
        labels: labels_rel,
        layers,
    })
}
