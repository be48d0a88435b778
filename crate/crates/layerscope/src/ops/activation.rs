//! ReLU and inverted dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    par::for_each_chunk_mut(out.data_mut(), 4096, |_, chunk| {
        for v in chunk {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    });
    out
}

/// Gradient is zero where the pre-activation was <= 0 (subgradient 0 at the kink).
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut gi = grad_out.clone();
    let pre = pre_activation.data();
    par::for_each_chunk_mut(gi.data_mut(), 4096, |ci, chunk| {
        let base = ci * 4096;
        for (j, g) in chunk.iter_mut().enumerate() {
            if pre[base + j] <= 0.0 {
                *g = 0.0;
            }
        }
    });
    gi
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout: keeps an element with probability `1 - rate` and scales
/// survivors by `1/(1-rate)`, so eval mode is the identity.
pub struct DropoutOut {
    pub output: Tensor,
    /// 0.0 where dropped, 1.0 where kept. Empty in eval mode.
    pub mask: Vec<f64>,
}

pub fn dropout(
    input: &Tensor,
    rate: f64,
    mode: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<DropoutOut> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArg(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok(DropoutOut {
            output: input.clone(),
            mask: Vec::new(),
        });
    }
    let scale = 1.0 / (1.0 - rate);
    let mut output = input.clone();
    // Mask generation is sequential so it consumes the stream reproducibly;
    // the scaling pass is where the work is.
    let mask: Vec<f64> = (0..input.numel())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 })
        .collect();
    for (o, m) in output.data_mut().iter_mut().zip(&mask) {
        *o *= m * scale;
    }
    Ok(DropoutOut { output, mask })
}

pub fn dropout_backward(mask: &[f64], rate: f64, grad_out: &Tensor) -> Tensor {
    if mask.is_empty() {
        return grad_out.clone();
    }
    let scale = 1.0 / (1.0 - rate);
    let mut gi = grad_out.clone();
    for (g, m) in gi.data_mut().iter_mut().zip(mask) {
        *g *= m * scale;
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, STREAM_DROPOUT};

    #[test]
    fn relu_sign_cases() {
        let input = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let out = relu(&input);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_zeroes_backward() {
        let input = Tensor::filled(&[2, 3], -4.0);
        let out = relu(&input);
        assert!(out.data().iter().all(|v| *v == 0.0));
        let gi = relu_backward(&input, &Tensor::filled(&[2, 3], 1.0));
        assert!(gi.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let input = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut rng = derive_rng(1, &[STREAM_DROPOUT]);
        let out = dropout(&input, 0.0, DropoutMode::Train, &mut rng).unwrap();
        assert!(out.output.bits_eq(&input));
        let out = dropout(&input, 0.0, DropoutMode::Eval, &mut rng).unwrap();
        assert!(out.output.bits_eq(&input));
    }

    #[test]
    fn dropout_eval_is_identity_at_any_rate() {
        let input = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut rng = derive_rng(2, &[STREAM_DROPOUT]);
        let out = dropout(&input, 0.7, DropoutMode::Eval, &mut rng).unwrap();
        assert!(out.output.bits_eq(&input));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let input = Tensor::zeros(&[4]);
        let mut rng = derive_rng(3, &[STREAM_DROPOUT]);
        assert!(dropout(&input, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_mean() {
        let n = 100_000;
        let input = Tensor::filled(&[n], 1.0);
        let mut rng = derive_rng(4, &[STREAM_DROPOUT]);
        let out = dropout(&input, 0.5, DropoutMode::Train, &mut rng).unwrap();
        let survivors = out.mask.iter().filter(|m| **m == 1.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        let mean = out.output.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "output mean {mean}");
    }

    #[test]
    fn dropout_mask_reproducible_from_stream() {
        let input = Tensor::filled(&[1000], 1.0);
        let mut a = derive_rng(9, &[STREAM_DROPOUT, 5]);
        let mut b = derive_rng(9, &[STREAM_DROPOUT, 5]);
        let out_a = dropout(&input, 0.3, DropoutMode::Train, &mut a).unwrap();
        let out_b = dropout(&input, 0.3, DropoutMode::Train, &mut b).unwrap();
        assert_eq!(out_a.mask, out_b.mask);
        assert!(out_a.output.bits_eq(&out_b.output));
    }
}
