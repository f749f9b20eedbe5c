//! Labels and the per-split dataset bundle.

use crate::error::{DacError, Result};
use crate::tensor::DenseMatrix;

/// Class labels for one split. Every label is < `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<u32>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DacError::Data(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(Self { labels, num_classes })
    }

    /// Interprets an `N x 1` tensor of integral values as labels.
    pub fn from_matrix(m: &DenseMatrix, num_classes: usize) -> Result<Self> {
        if m.cols() != 1 {
            return Err(DacError::Shape(format!(
                "label tensor must be Nx1, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let mut labels = Vec::with_capacity(m.rows());
        for &v in m.data() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(DacError::Data(format!("non-integral label value {}", v)));
            }
            labels.push(v as u32);
        }
        LabelVector::new(labels, num_classes)
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::new(self.labels.len(), 1, self.labels.iter().map(|&l| l as f32).collect())
            .expect("consistent shape")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }
}

/// Labels + logits + named per-layer embeddings for one split.
#[derive(Debug, Clone)]
pub struct CalibrationDataset {
    pub split_name: String,
    /// Absent for unlabeled OOD scoring splits.
    pub labels: Option<LabelVector>,
    /// `N x C` logits.
    pub logits: DenseMatrix,
    /// Ordered (layer name, `N x D_l` features); the name list must be
    /// duplicate-free and identical in order across splits.
    pub layers: Vec<(String, DenseMatrix)>,
}

impl CalibrationDataset {
    pub fn num_samples(&self) -> usize {
        self.logits.rows()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Checks the row-count and layer-name invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.logits.rows();
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(DacError::Shape(format!(
                    "split {}: {} labels vs {} logit rows",
                    self.split_name,
                    labels.len(),
                    n
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (name, features) in &self.layers {
            if features.rows() != n {
                return Err(DacError::Shape(format!(
                    "split {}: layer {} has {} rows, expected {}",
                    self.split_name,
                    name,
                    features.rows(),
                    n
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(DacError::Config(format!(
                    "split {}: duplicate layer name {}",
                    self.split_name, name
                )));
            }
        }
        Ok(())
    }

    /// A new dataset holding the given rows, in order. Out-of-range
    /// indices are a shape error.
    pub fn subset(&self, rows: &[usize]) -> Result<CalibrationDataset> {
        let n = self.num_samples();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(DacError::Shape(format!(
                "split {}: subset row {} out of {}",
                self.split_name, bad, n
            )));
        }
        let gather = |m: &DenseMatrix| -> DenseMatrix {
            let mut data = Vec::with_capacity(rows.len() * m.cols());
            for &r in rows {
                data.extend_from_slice(m.row(r));
            }
            DenseMatrix::new(rows.len(), m.cols(), data).expect("consistent shape")
        };
        let labels = self.labels.as_ref().map(|l| {
            LabelVector::new(
                rows.iter().map(|&r| l.get(r)).collect(),
                l.num_classes(),
            )
            .expect("labels already validated")
        });
        Ok(CalibrationDataset {
            split_name: self.split_name.clone(),
            labels,
            logits: gather(&self.logits),
            layers: self
                .layers
                .iter()
                .map(|(name, feats)| (name.clone(), gather(feats)))
                .collect(),
        })
    }
}
