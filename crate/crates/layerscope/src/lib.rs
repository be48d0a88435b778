//! layerscope: measure how much individual CNN layers memorize their
//! training data, and train the leakiest layers inside a simulated
//! memory-budgeted enclave.
//!
//! The pipeline: train a small convolutional network from scratch (f64
//! everywhere, bitwise reproducible), fine-tune each conv/FC layer once on
//! the private half of the data and once on all of it, and compare the
//! resulting generalization errors. The normalized gap is that layer's
//! exposure risk. Because the risk concentrates in the last layers, those
//! can be partitioned into a secure worker process with a hard memory
//! budget, at a measured training-time overhead.
//!
//! Entry points: [`model::Model`] + [`train::train`] for plain training,
//! [`exposure::measure_all`] for the per-layer measurement,
//! [`enclave::sweep_cuts`] for the partition study.

pub mod arch;
pub mod data;
pub mod enclave;
pub mod error;
pub mod exposure;
pub mod model;
pub mod ops;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use arch::{arch_to_string, parse_arch, LayerSpec, VGG7, VGG7_DROPOUT};
pub use data::{gen_synthetic, split_private, Dataset, DatasetDescriptor, PrivateSplit};
pub use error::{Error, Result};
pub use exposure::{measure_all, ExposureConfig, ExposureReport};
pub use model::{Model, BatchCtx};
pub use tensor::Tensor;
pub use train::{evaluate, train, Evaluation, TrainConfig};
