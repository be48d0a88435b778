//! Synthetic class-blob images: a fast, linearly separable stand-in for the
//! real datasets so trend tests run in seconds.
//!
//! Each class has a mean image (dim background, one bright pixel block per
//! class); samples add clamped Gaussian noise. With pairwise class-mean
//! distance at least 6 sigma, a nearest-mean classifier is essentially
//! perfect, which the tests use as an oracle.

use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, STREAM_SYNTHETIC};
use crate::tensor::Tensor;

/// Noise standard deviation around each class mean.
pub const NOISE_SIGMA: f64 = 0.1;
const BACKGROUND: f64 = 0.1;
const BLOCK: f64 = 0.9;

/// The class means used by [`gen_synthetic`]: value `BLOCK` on the class's
/// own pixel block, `BACKGROUND` elsewhere. Exposed so tests can run a
/// nearest-mean oracle against generated data.
pub fn class_means(num_classes: usize, image_shape: [usize; 3]) -> Result<Vec<Tensor>> {
    let pixels: usize = image_shape.iter().product();
    let block = pixels / num_classes;
    if block == 0 {
        return Err(Error::InvalidArg(format!(
            "image shape {image_shape:?} has {pixels} pixels, too small for {num_classes} distinct class means"
        )));
    }
    let mut means = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut data = vec![BACKGROUND; pixels];
        for v in &mut data[c * block..(c + 1) * block] {
            *v = BLOCK;
        }
        means.push(Tensor::from_vec(
            &[image_shape[0], image_shape[1], image_shape[2]],
            data,
        )?);
    }
    Ok(means)
}

/// Distance between any two distinct class means (all pairs are equal by
/// construction: the means differ on exactly two blocks).
pub fn mean_separation(num_classes: usize, image_shape: [usize; 3]) -> Result<f64> {
    let pixels: usize = image_shape.iter().product();
    let block = pixels / num_classes;
    if block == 0 {
        return Err(Error::InvalidArg(format!(
            "image shape {image_shape:?} too small for {num_classes} classes"
        )));
    }
    Ok((BLOCK - BACKGROUND) * (2.0 * block as f64).sqrt())
}

/// Generate `num_classes * per_class` labeled images (labels interleaved
/// `i % num_classes`), bitwise reproducible from the seed. Rejects shapes
/// whose class means cannot be at least `margin` apart.
pub fn gen_synthetic(
    num_classes: usize,
    per_class: usize,
    image_shape: [usize; 3],
    margin: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArg(format!(
            "synthetic data needs at least 2 classes, got {num_classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArg("per_class must be at least 1".into()));
    }
    let separation = mean_separation(num_classes, image_shape)?;
    if separation < margin {
        return Err(Error::InvalidArg(format!(
            "class means are {separation:.3} apart, below the requested margin {margin}"
        )));
    }

    let means = class_means(num_classes, image_shape)?;
    let pixels = means[0].numel();
    let k = num_classes * per_class;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid normal parameters");
    let mut data = Vec::with_capacity(k * pixels);
    let mut labels = Vec::with_capacity(k);
    for i in 0..k {
        let label = i % num_classes;
        let mut rng = derive_rng(seed, &[STREAM_SYNTHETIC, i as u64]);
        let mean = means[label].data();
        data.extend((0..pixels).map(|p| (mean[p] + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        labels.push(label);
    }
    let images = Tensor::from_vec(
        &[k, image_shape[0], image_shape[1], image_shape[2]],
        data,
    )?;
    Dataset::new("synthetic", images, labels, num_classes)
}
