//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! the R, G, and B planes of a 32x32 image.

use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
const PLANE: usize = 32 * 32;

/// Load and concatenate CIFAR-10 batch files into `[K,3,32,32]` in [0,1].
pub fn load_cifar10(batch_paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path)?;
        append_batch(path, &bytes, &mut pixels, &mut labels)?;
    }
    let k = labels.len();
    let images = Tensor::from_vec(&[k, 3, 32, 32], pixels)?;
    Dataset::new("cifar10", images, labels, CIFAR_CLASSES)
}

fn append_batch(
    path: &Path,
    bytes: &[u8],
    pixels: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::BadRecordLength {
            path: path.display().to_string(),
            len: bytes.len() as u64,
            record: RECORD_BYTES as u64,
        });
    }
    pixels.reserve(bytes.len() / RECORD_BYTES * 3 * PLANE);
    for record in bytes.chunks_exact(RECORD_BYTES) {
        labels.push(record[0] as usize);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}
