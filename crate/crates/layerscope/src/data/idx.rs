//! IDX container format, as used by MNIST and Fashion-MNIST.
//!
//! Layout: 4-byte big-endian magic (two zero bytes, dtype 0x08 = unsigned
//! byte, then the dimension count), one big-endian u32 per dimension, then
//! the raw payload. Images are 0x00000803 with dims [count, rows, cols];
//! labels are 0x00000801 with dims [count].

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
/// IDX datasets are the ten digit/garment classes.
pub const IDX_CLASSES: usize = 10;

struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxFile> {
    let bytes = std::fs::read(path)?;
    let display = path.display().to_string();
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: display,
            expected: 4,
            found: bytes.len() as u64,
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != expected_magic {
        return Err(Error::BadMagic {
            path: display,
            expected: expected_magic,
            found: magic,
        });
    }
    let ndim = (magic & 0xFF) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: display,
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let o = 4 + 4 * d;
        dims.push(u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let expected = header as u64 + dims.iter().product::<usize>() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: display,
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(IdxFile {
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Load an images/labels IDX pair into a `[K,1,rows,cols]` dataset scaled
/// to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx(images_path, IMAGES_MAGIC)?;
    let labels = read_idx(labels_path, LABELS_MAGIC)?;
    let (k, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if k != labels.dims[0] {
        return Err(Error::CountMismatch {
            images: k,
            labels: labels.dims[0],
        });
    }
    let data: Vec<f64> = images.payload.iter().map(|&b| b as f64 / 255.0).collect();
    let tensor = Tensor::from_vec(&[k, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.payload.iter().map(|&b| b as usize).collect();
    Dataset::new("idx", tensor, labels, IDX_CLASSES)
}

/// Serialize a single-channel dataset to IDX bytes (images file, labels
/// file), re-quantizing pixels to bytes. For byte-sourced pixel values this
/// is the exact inverse of [`load_idx`].
pub fn to_idx_bytes(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, rows, cols] = dataset.input_shape();
    if c != 1 {
        return Err(Error::InvalidArg(format!(
            "IDX export is single-channel, dataset has {c} channels"
        )));
    }
    let k = dataset.len();

    let mut images = Vec::with_capacity(16 + k * rows * cols);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [k, rows, cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(dataset.images.data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + k);
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(k as u32).to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Write the [`to_idx_bytes`] pair to disk.
pub fn export_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = to_idx_bytes(dataset)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled two-image 2x2 fixture.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        for d in [2u32, 2, 2] {
            images.extend_from_slice(&d.to_be_bytes());
        }
        images.extend_from_slice(&[0, 51, 102, 255, 255, 204, 153, 0]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 3]);
        (images, labels)
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images-idx3-ubyte");
        let lp = dir.join("labels-idx1-ubyte");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn fixture_pixels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture();
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape(), [2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[0], 0.0);
        assert_eq!(ds.images.data()[1], 51.0 / 255.0);
        assert_eq!(ds.images.data()[3], 1.0);

        // export and compare bytes exactly
        let op = dir.path().join("out-images");
        let ol = dir.path().join("out-labels");
        export_idx(&ds, &op, &ol).unwrap();
        assert_eq!(std::fs::read(&op).unwrap(), images);
        assert_eq!(std::fs::read(&ol).unwrap(), labels);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (mut images, labels) = fixture();
        images[2] = 0x09;
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncation_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture();
        let cut = &images[..images.len() - 3];
        let (ip, lp) = write_pair(dir.path(), cut, &labels);
        match load_idx(&ip, &lp) {
            Err(Error::Truncated { expected, found, .. }) => {
                assert_eq!(expected, 24);
                assert_eq!(found, 21);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, mut labels) = fixture();
        labels[7] = 3; // declare 3 labels
        labels.push(1);
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let (images, mut labels) = fixture();
        labels[9] = 17;
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::LabelOutOfRange { label: 17, .. })
        ));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (mut images, labels) = fixture();
        images.push(0);
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));
    }
}
