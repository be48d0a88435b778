//! The private/non-private split: X -> (S, T).

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, STREAM_SPLIT};

/// Disjoint halves of a training set. S is the private set whose exposure
/// is measured; T is the non-private remainder. |S| = floor(K/2).
#[derive(Debug, Clone)]
pub struct PrivateSplit {
    pub s: Dataset,
    pub t: Dataset,
    pub seed: u64,
    pub s_indices: Vec<usize>,
    pub t_indices: Vec<usize>,
}

/// Seeded uniform shuffle of 0..K; the first floor(K/2) indices become S,
/// the rest T. Reproducible: the same seed yields the same index lists.
pub fn split_private(dataset: &Dataset, seed: u64) -> Result<PrivateSplit> {
    let k = dataset.len();
    if k < 2 {
        return Err(Error::InvalidArg(format!(
            "private split needs at least 2 examples, got {k}"
        )));
    }
    let mut indices: Vec<usize> = (0..k).collect();
    let mut rng = derive_rng(seed, &[STREAM_SPLIT]);
    indices.shuffle(&mut rng);
    let ks = k / 2;
    let s_indices = indices[..ks].to_vec();
    let t_indices = indices[ks..].to_vec();
    let s = dataset.subset(format!("{}-S", dataset.name), &s_indices)?;
    let t = dataset.subset(format!("{}-T", dataset.name), &t_indices)?;
    Ok(PrivateSplit {
        s,
        t,
        seed,
        s_indices,
        t_indices,
    })
}
