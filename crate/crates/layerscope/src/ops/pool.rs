//! Max pooling with argmax routing for the backward pass.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Forward output plus the flat input index of each window's maximum.
pub struct PoolOut {
    pub output: Tensor,
    /// One entry per output element; ties resolved to the first maximum in
    /// row-major window order.
    pub argmax: Vec<usize>,
}

pub fn pool_out_dim(in_dim: usize, size: usize, stride: usize) -> Result<usize> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArg(
            "maxpool size and stride must be >= 1".into(),
        ));
    }
    if in_dim < size {
        return Err(Error::Shape(format!(
            "maxpool input dim {in_dim} is smaller than window {size}"
        )));
    }
    Ok((in_dim - size) / stride + 1)
}

/// `input [N,C,H,W] -> [N,C,H',W']` with `H' = (H - size)/stride + 1`.
pub fn maxpool2d(input: &Tensor, size: usize, stride: usize) -> Result<PoolOut> {
    if input.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "maxpool input must be [N,C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hp = pool_out_dim(h, size, stride)?;
    let wp = pool_out_dim(w, size, stride)?;

    let in_data = input.data();
    let plane_out = hp * wp;
    let mut argmax = vec![0usize; n * c * plane_out];

    par::for_each_chunk_mut(&mut argmax, plane_out, |plane, arg_plane| {
        let base = plane * h * w;
        let in_plane = &in_data[base..base + h * w];
        for oh in 0..hp {
            for ow in 0..wp {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dh in 0..size {
                    let row = (oh * stride + dh) * w + ow * stride;
                    for dw in 0..size {
                        let v = in_plane[row + dw];
                        if v > best {
                            best = v;
                            best_idx = base + row + dw;
                        }
                    }
                }
                arg_plane[oh * wp + ow] = best_idx;
            }
        }
    });

    let mut output = Tensor::zeros(&[n, c, hp, wp]);
    par::for_each_chunk_mut(output.data_mut(), plane_out, |plane, out_plane| {
        let args = &argmax[plane * plane_out..(plane + 1) * plane_out];
        for (o, idx) in out_plane.iter_mut().zip(args) {
            *o = in_data[*idx];
        }
    });

    Ok(PoolOut { output, argmax })
}

/// Route incoming gradients to the recorded argmax positions.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad_input = Tensor::zeros(input_shape);
    let gi = grad_input.data_mut();
    for (idx, g) in argmax.iter().zip(grad_out.data()) {
        gi[*idx] += g;
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(pooled.output.shape(), [1, 1, 1, 1]);
        assert_eq!(pooled.output.data(), &[4.0]);
        let go = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let gi = maxpool2d_backward(&[1, 1, 2, 2], &pooled.argmax, &go);
        assert_eq!(gi.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_sizes_floor() {
        let input = Tensor::zeros(&[1, 1, 7, 7]);
        let pooled = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(pooled.output.shape(), [1, 1, 3, 3]);
    }

    #[test]
    fn ties_pick_first_in_row_major_order() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let pooled = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(pooled.argmax, vec![0]);
        let go = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let gi = maxpool2d_backward(&[1, 1, 2, 2], &pooled.argmax, &go);
        assert_eq!(gi.data(), &[2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_window_enumeration_oracle() {
        use crate::rng::{derive_rng, STREAM_INIT};
        use rand::Rng;
        let mut rng = derive_rng(77, &[STREAM_INIT]);
        let data: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.gen::<f64>()).collect();
        let input = Tensor::from_vec(&[1, 2, 6, 6], data).unwrap();
        let pooled = maxpool2d(&input, 2, 2).unwrap();

        // brute-force window enumeration
        for ci in 0..2 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let v = input.data()[(ci * 6 + oh * 2 + dh) * 6 + ow * 2 + dw];
                            best = best.max(v);
                        }
                    }
                    assert_eq!(pooled.output.data()[(ci * 3 + oh) * 3 + ow], best);
                }
            }
        }
    }

    #[test]
    fn overlapping_windows_accumulate_backward() {
        // size 2, stride 1: interior cells can win several windows
        let input = Tensor::from_vec(&[1, 1, 3, 3], vec![0., 0., 0., 0., 9., 0., 0., 0., 0.])
            .unwrap();
        let pooled = maxpool2d(&input, 2, 1).unwrap();
        assert_eq!(pooled.output.shape(), [1, 1, 2, 2]);
        let go = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let gi = maxpool2d_backward(&[1, 1, 3, 3], &pooled.argmax, &go);
        assert_eq!(gi.data()[4], 4.0); // the 9 wins all four windows
    }

    #[test]
    fn rejects_input_smaller_than_window() {
        let input = Tensor::zeros(&[1, 1, 1, 4]);
        assert!(maxpool2d(&input, 2, 2).is_err());
    }
}
