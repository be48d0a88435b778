//! Softmax cross-entropy loss with max-subtraction for stability.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct SoftmaxXent {
    /// Mean of `per_example` over the batch.
    pub mean_loss: f64,
    /// `[N,K]` rows summing to 1.
    pub probs: Tensor,
    pub per_example: Vec<f64>,
}

/// `logits [N,K]`, `labels` as class indices in `[0, K)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<SoftmaxXent> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy expects [N,K] logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy got {} labels for batch of {n}",
            labels.len()
        )));
    }
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: label as u32,
                num_classes: k,
            });
        }
    }

    let mut probs = logits.clone();
    par::for_each_chunk_mut(probs.data_mut(), k, |_, row| {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    });

    // Losses keep the log-sum-exp form; -ln(probs) would overflow to inf
    // for strongly saturated wrong answers.
    let logit_data = logits.data();
    let mut per_example = Vec::with_capacity(n);
    for (ni, &label) in labels.iter().enumerate() {
        let row = &logit_data[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        per_example.push(z.ln() + max - row[label]);
    }

    let mean_loss = per_example.iter().sum::<f64>() / n as f64;
    Ok(SoftmaxXent {
        mean_loss,
        probs,
        per_example,
    })
}

/// Gradient of the mean loss w.r.t. the logits: `(probs - onehot) / N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let inv_n = 1.0 / n as f64;
    let mut grad = probs.clone();
    let gd = grad.data_mut();
    for (ni, &label) in labels.iter().enumerate() {
        let row = &mut gd[ni * k..(ni + 1) * k];
        for v in row.iter_mut() {
            *v *= inv_n;
        }
        row[label] -= inv_n;
    }
    grad
}
