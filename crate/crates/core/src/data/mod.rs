//! Datasets, synthetic generators, IDX ingestion and non-IID partitioning.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use partition::{
    dirichlet_label_partition, feature_shift_partition, ClientAssignment, ClientPartition,
    ClientRole, DomainTransform, ShiftConfig, ShiftMode,
};
pub use synth::{synth_gmm_dataset, GenerativeParams, SynthSpec};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid shift config: {0}")]
    Config(String),
    #[error("partition failed: {0}")]
    Partition(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Labelled samples, one row of `features` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    domains: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = features.dims2("dataset")?;
        if n != labels.len() {
            return Err(DataError::Invalid(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        if !features.is_finite() {
            return Err(DataError::Invalid(
                "features contain non-finite values".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domains: None,
        })
    }

    pub fn with_domains(mut self, domains: Vec<usize>) -> Result<Self> {
        if domains.len() != self.labels.len() {
            return Err(DataError::Invalid(
                "domain ids must cover every sample".into(),
            ));
        }
        self.domains = Some(domains);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> Option<&[usize]> {
        self.domains.as_deref()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Copies the selected samples, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(DataError::Invalid("empty subset".into()));
        }
        let features = self.features.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let domains = self
            .domains
            .as_ref()
            .map(|d| indices.iter().map(|&i| d[i]).collect());
        Ok(Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            domains,
        })
    }

    /// Per-column mean and population standard deviation.
    pub fn column_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.len(), self.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(self.features.row_slice(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(self.features.row_slice(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        (mean, std)
    }

    /// Per-column z-scores. Constant columns are only centred.
    pub fn standardized(&self) -> Dataset {
        let (mean, std) = self.column_moments();
        let mut features = self.features.clone();
        for i in 0..self.len() {
            for ((v, m), s) in features.row_slice_mut(i).iter_mut().zip(&mean).zip(&std) {
                *v -= m;
                if *s > 1e-12 {
                    *v /= s;
                }
            }
        }
        Dataset {
            features,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels() {
        let f = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(f.clone(), vec![0, 5], 3).is_err());
        assert!(Dataset::new(f.clone(), vec![0], 3).is_err());
        let nan = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(Dataset::new(nan, vec![0], 2).is_err());
        assert!(Dataset::new(f, vec![0, 2], 3).is_ok());
    }

    #[test]
    fn subset_keeps_domains() {
        let f = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let ds = Dataset::new(f, vec![0, 1, 0], 2)
            .unwrap()
            .with_domains(vec![5, 6, 7])
            .unwrap();
        let sub = ds.subset(&[2, 0]).unwrap();
        assert_eq!(sub.features().data(), &[2.0, 0.0]);
        assert_eq!(sub.domains().unwrap(), &[7, 5]);
        assert_eq!(sub.class_histogram(), vec![2, 0]);
    }

    #[test]
    fn standardized_columns() {
        let f = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let ds = Dataset::new(f, vec![0, 1, 0], 2).unwrap().standardized();
        let (mean, std) = ds.column_moments();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!((std[0] - 1.0).abs() < 1e-12);
        assert_eq!(std[1], 0.0);
    }
}
