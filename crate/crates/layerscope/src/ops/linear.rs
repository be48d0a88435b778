//! Fully connected layer: `out = input (.) weights + bias`.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub struct LinearGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn check_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<()> {
    if input.shape().len() != 2 || weights.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "fully_connected expects input [N,D] and weights [D,U], got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    if input.dim(1) != weights.dim(0) {
        return Err(Error::Shape(format!(
            "fully_connected input dim {} does not match weights dim {}",
            input.dim(1),
            weights.dim(0)
        )));
    }
    if bias.shape() != [weights.dim(1)] {
        return Err(Error::Shape(format!(
            "fully_connected bias must be [{}], got {:?}",
            weights.dim(1),
            bias.shape()
        )));
    }
    Ok(())
}

/// `input [N,D] * weights [D,U] + bias [U] -> [N,U]`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_shapes(input, weights, bias)?;
    let (n, d, u) = (input.dim(0), input.dim(1), weights.dim(1));
    let mut out = Tensor::zeros(&[n, u]);
    let in_data = input.data();
    let w_data = weights.data();
    let b_data = bias.data();

    par::for_each_chunk_mut(out.data_mut(), u, |ni, out_row| {
        out_row.copy_from_slice(b_data);
        let in_row = &in_data[ni * d..(ni + 1) * d];
        for (di, x) in in_row.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let w_row = &w_data[di * u..(di + 1) * u];
            for (o, wv) in out_row.iter_mut().zip(w_row) {
                *o += x * wv;
            }
        }
    });
    Ok(out)
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<LinearGrads> {
    let (n, d, u) = (input.dim(0), input.dim(1), weights.dim(1));
    if grad_out.shape() != [n, u] {
        return Err(Error::Shape(format!(
            "fully_connected_backward grad_out shape {:?} does not match [{n},{u}]",
            grad_out.shape()
        )));
    }
    let in_data = input.data();
    let w_data = weights.data();
    let go_data = grad_out.data();

    // grad_w[d][u] = sum_n input[n][d] * grad_out[n][u]; one task per input dim.
    let mut grad_w = Tensor::zeros(&[d, u]);
    par::for_each_chunk_mut(grad_w.data_mut(), u, |di, gw_row| {
        for ni in 0..n {
            let x = in_data[ni * d + di];
            if x == 0.0 {
                continue;
            }
            let go_row = &go_data[ni * u..(ni + 1) * u];
            for (g, go) in gw_row.iter_mut().zip(go_row) {
                *g += x * go;
            }
        }
    });

    let mut grad_b = Tensor::zeros(&[u]);
    {
        let gb = grad_b.data_mut();
        for ni in 0..n {
            let go_row = &go_data[ni * u..(ni + 1) * u];
            for (g, go) in gb.iter_mut().zip(go_row) {
                *g += go;
            }
        }
    }

    let grad_input = if want_input_grad {
        let mut gi = Tensor::zeros(&[n, d]);
        par::for_each_chunk_mut(gi.data_mut(), d, |ni, gi_row| {
            let go_row = &go_data[ni * u..(ni + 1) * u];
            for (di, g) in gi_row.iter_mut().enumerate() {
                let w_row = &w_data[di * u..(di + 1) * u];
                let mut acc = 0.0;
                for (wv, go) in w_row.iter().zip(go_row) {
                    acc += wv * go;
                }
                *g = acc;
            }
        });
        Some(gi)
    } else {
        None
    };

    Ok(LinearGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}
