//! Labeled datasets, long-tailed subsampling, balanced validation carving,
//! synthetic Gaussian mixtures, and CIFAR-10 binary ingestion.

mod batches;
mod cifar;
mod gaussian;
mod longtail;

pub use batches::{BatchOrder, CyclingSampler};
pub use cifar::{encode_cifar10_record, load_cifar10_binary, parse_cifar10_bytes, ChannelNorm, CIFAR10_RECORD_LEN};
pub use gaussian::{gen_gaussian_mix, GaussianMixSpec};
pub use longtail::{carve_validation, class_counts, make_longtail, LongTailSpec};

use crate::container::{ArrayData, Container, NamedArray};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Features are stored in single precision; batches are cast to the
/// working precision on extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f32>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(features: Vec<f32>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::Data("dataset dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} feature values do not match {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Data(format!("label {y} at sample {i} out of range for {classes} classes")));
            }
            by_class[y].push(i);
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices of each class, in ascending order.
    pub fn class_indices(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    pub fn counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range for {} samples", self.len())));
            }
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.classes)
    }

    /// Feature matrix of the selected samples.
    pub fn features_tensor<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![indices.len(), self.dim], data).expect("consistent dims")
    }

    pub fn all_features<T: Real>(&self) -> Tensor<T> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features_tensor(&idx)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn to_container(&self, name: &str) -> Container {
        Container {
            kind: "dataset".into(),
            meta: serde_json::json!({
                "name": name,
                "classes": self.classes,
                "dim": self.dim,
                "counts": self.counts(),
            }),
            arrays: vec![
                NamedArray {
                    name: "features".into(),
                    shape: vec![self.len(), self.dim],
                    data: ArrayData::F32(self.features.clone()),
                },
                NamedArray {
                    name: "labels".into(),
                    shape: vec![self.len()],
                    data: ArrayData::U32(self.labels.iter().map(|&y| y as u32).collect()),
                },
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "dataset" {
            return Err(Error::Data(format!("expected a dataset container, found kind {:?}", c.kind)));
        }
        let classes = c
            .meta
            .get("classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("dataset manifest lacks a class count".into()))? as usize;
        let features = c.array("features")?;
        let labels = c.array("labels")?;
        let (ArrayData::F32(fdata), ArrayData::U32(ldata)) = (&features.data, &labels.data) else {
            return Err(Error::Data("dataset arrays must be f32 features and u32 labels".into()));
        };
        let [n, dim] = features.shape[..] else {
            return Err(Error::Data("dataset features must be rank 2".into()));
        };
        if labels.shape != [n] {
            return Err(Error::Data("dataset labels must have one entry per sample".into()));
        }
        Self::new(fdata.clone(), dim, ldata.iter().map(|&y| y as usize).collect(), classes)
    }
}
