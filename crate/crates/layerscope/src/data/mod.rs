//! Dataset loading: MNIST-style IDX files, CIFAR-10 binary batches, the
//! private/non-private split, and a synthetic generator for fast tests.
//!
//! All loaders produce pixel values in [0,1] (raw bytes divided by 255,
//! nothing else), which keeps the IDX round-trip bijective.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod cifar;
pub mod idx;
pub mod split;
pub mod synthetic;

pub use cifar::load_cifar10;
pub use idx::{export_idx, load_idx};
pub use split::{split_private, PrivateSplit};
pub use synthetic::gen_synthetic;

/// An immutable labeled image set: `[K,C,H,W]` pixels in [0,1] plus class
/// indices. Safe to share across threads once loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    /// Validate and assemble. Rejects count mismatches and out-of-range
    /// labels; pixel range is the loaders' contract.
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Dataset> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be [K,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::CountMismatch {
                images: images.dim(0),
                labels: labels.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    index,
                    label: label as u32,
                    num_classes,
                });
            }
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape `[C,H,W]`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    fn example_numel(&self) -> usize {
        self.images.dim(1) * self.images.dim(2) * self.images.dim(3)
    }

    /// Gather the given examples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let e = self.example_numel();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * e);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * e..(i + 1) * e]);
            labels.push(self.labels[i]);
        }
        let shape = full_batch_shape(indices.len(), &self.input_shape());
        (Tensor::from_vec(&shape, data).expect("sized batch"), labels)
    }

    /// New dataset with the selected examples, in the given order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Dataset> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArg(format!(
                    "subset index {i} out of range for {} examples",
                    self.len()
                )));
            }
        }
        let (images, labels) = self.batch(indices);
        Dataset::new(name, images, labels, self.num_classes)
    }

    /// Concatenate two compatible datasets, `self`'s examples first.
    pub fn concat(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset> {
        if self.input_shape() != other.input_shape() || self.num_classes != other.num_classes {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?}x{} with {:?}x{}",
                self.input_shape(),
                self.num_classes,
                other.input_shape(),
                other.num_classes
            )));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let shape = full_batch_shape(self.len() + other.len(), &self.input_shape());
        Dataset::new(
            name,
            Tensor::from_vec(&shape, data)?,
            labels,
            self.num_classes,
        )
    }

    /// Deterministically subsample `n` examples: seeded index shuffle, take
    /// the first `n`, then restore ascending order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidArg(format!(
                "cannot subsample {n} of {} examples",
                self.len()
            )));
        }
        use rand::seq::SliceRandom;
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = crate::rng::derive_rng(seed, &[crate::rng::STREAM_SPLIT, n as u64]);
        indices.shuffle(&mut rng);
        let mut take: Vec<usize> = indices[..n].to_vec();
        take.sort_unstable();
        self.subset(format!("{}-{}", self.name, n), &take)
    }
}

fn full_batch_shape(n: usize, per_sample: &[usize; 3]) -> Vec<usize> {
    vec![n, per_sample[0], per_sample[1], per_sample[2]]
}

/// On-disk description of a dataset source, the CLI's `--dataset` argument.
/// Relative paths are resolved against the descriptor file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DatasetSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Cifar10 {
        batches: Vec<PathBuf>,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: [usize; 3],
        margin: f64,
        seed: u64,
    },
}

impl DatasetDescriptor {
    pub fn from_file(path: &Path) -> Result<DatasetDescriptor> {
        let text = std::fs::read_to_string(path)?;
        let desc: DatasetDescriptor = serde_json::from_str(&text)?;
        if desc.name.is_empty() {
            return Err(Error::Descriptor("dataset name must be nonempty".into()));
        }
        Ok(desc)
    }

    /// Load the dataset, resolving relative paths against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut ds = match &self.source {
            DatasetSource::Idx { images, labels } => load_idx(&resolve(images), &resolve(labels))?,
            DatasetSource::Cifar10 { batches } => {
                let paths: Vec<PathBuf> = batches.iter().map(|p| resolve(p)).collect();
                load_cifar10(&paths)?
            }
            DatasetSource::Synthetic {
                classes,
                per_class,
                shape,
                margin,
                seed,
            } => gen_synthetic(*classes, *per_class, *shape, *margin, *seed)?,
        };
        ds.name = self.name.clone();
        Ok(ds)
    }
}

/// Convenience: parse a descriptor file and load its dataset.
pub fn load_descriptor(path: &Path) -> Result<Dataset> {
    let desc = DatasetDescriptor::from_file(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    desc.load(base)
}
