//! 2D convolution with 3x3 kernels, forward and backward.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

/// Gradients of the convolution forward map.
pub struct ConvGrads {
    /// Present only when requested; skipped below the lowest trainable layer.
    pub input: Option<Tensor>,
    pub kernels: Tensor,
    pub bias: Tensor,
}

fn check_shapes(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<()> {
    if input.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d input must be [N,C,H,W], got {:?}",
            input.shape()
        )));
    }
    if kernels.shape().len() != 4 || kernels.dim(2) != KERNEL || kernels.dim(3) != KERNEL {
        return Err(Error::Shape(format!(
            "conv2d kernels must be [F,C,{KERNEL},{KERNEL}], got {:?}",
            kernels.shape()
        )));
    }
    if input.dim(1) != kernels.dim(1) {
        return Err(Error::Shape(format!(
            "conv2d input channels {} do not match kernel channels {}",
            input.dim(1),
            kernels.dim(1)
        )));
    }
    if bias.shape() != [kernels.dim(0)] {
        return Err(Error::Shape(format!(
            "conv2d bias must be [{}], got {:?}",
            kernels.dim(0),
            bias.shape()
        )));
    }
    Ok(())
}

/// Spatial output size for one axis.
pub fn conv_out_dim(in_dim: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    if in_dim + 2 * pad < KERNEL {
        return Err(Error::Shape(format!(
            "conv2d input dim {in_dim} with pad {pad} is smaller than the {KERNEL}x{KERNEL} kernel"
        )));
    }
    Ok((in_dim + 2 * pad - KERNEL) / stride + 1)
}

/// `input [N,C,H,W] * kernels [F,C,3,3] + bias [F] -> [N,F,H',W']`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_shapes(input, kernels, bias)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let f = kernels.dim(0);
    let hp = conv_out_dim(h, stride, pad)?;
    let wp = conv_out_dim(w, stride, pad)?;

    let mut out = Tensor::zeros(&[n, f, hp, wp]);
    let in_data = input.data();
    let k_data = kernels.data();
    let b_data = bias.data();
    let sample_out = f * hp * wp;

    par::for_each_chunk_mut(out.data_mut(), sample_out, |ni, out_n| {
        let in_n = &in_data[ni * c * h * w..(ni + 1) * c * h * w];
        for fi in 0..f {
            let out_f = &mut out_n[fi * hp * wp..(fi + 1) * hp * wp];
            out_f.fill(b_data[fi]);
            for ci in 0..c {
                let in_c = &in_n[ci * h * w..(ci + 1) * h * w];
                let k_fc = &k_data[(fi * c + ci) * KERNEL * KERNEL..];
                for kh in 0..KERNEL {
                    for kw in 0..KERNEL {
                        let weight = k_fc[kh * KERNEL + kw];
                        if weight == 0.0 {
                            continue;
                        }
                        accumulate_rows(out_f, in_c, weight, hp, wp, h, w, stride, pad, kh, kw);
                    }
                }
            }
        }
    });
    Ok(out)
}

// Adds weight * shifted input rows into the output rows of one filter.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_rows(
    out_f: &mut [f64],
    in_c: &[f64],
    weight: f64,
    hp: usize,
    wp: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) {
    for oh in 0..hp {
        let ih = (oh * stride + kh) as isize - pad as isize;
        if ih < 0 || ih >= h as isize {
            continue;
        }
        let in_row = &in_c[ih as usize * w..(ih as usize + 1) * w];
        let (ow_lo, ow_hi) = ow_range(wp, w, stride, pad, kw);
        if ow_lo > ow_hi {
            continue;
        }
        let out_row = &mut out_f[oh * wp..(oh + 1) * wp];
        if stride == 1 {
            let base = ow_lo + kw - pad;
            let in_seg = &in_row[base..base + (ow_hi - ow_lo + 1)];
            for (o, iv) in out_row[ow_lo..=ow_hi].iter_mut().zip(in_seg) {
                *o += weight * iv;
            }
        } else {
            for ow in ow_lo..=ow_hi {
                let iw = ow * stride + kw - pad;
                out_row[ow] += weight * in_row[iw];
            }
        }
    }
}

// Valid output-column range so that iw = ow*stride + kw - pad lands in [0, w).
#[inline]
fn ow_range(wp: usize, w: usize, stride: usize, pad: usize, kw: usize) -> (usize, usize) {
    let lo = if kw >= pad {
        0
    } else {
        (pad - kw).div_ceil(stride)
    };
    let hi_num = (w + pad) as isize - kw as isize - 1;
    if hi_num < 0 {
        return (1, 0);
    }
    let hi = (hi_num as usize / stride).min(wp.saturating_sub(1));
    (lo.min(wp), hi)
}

/// Backward pass. `grad_out` is `[N,F,H',W']`; `want_input_grad` skips the
/// input-gradient chain when nothing below this layer needs it.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want_input_grad: bool,
) -> Result<ConvGrads> {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let f = kernels.dim(0);
    let hp = conv_out_dim(h, stride, pad)?;
    let wp = conv_out_dim(w, stride, pad)?;
    if grad_out.shape() != [n, f, hp, wp] {
        return Err(Error::Shape(format!(
            "conv2d_backward grad_out shape {:?} does not match forward output [{n},{f},{hp},{wp}]",
            grad_out.shape()
        )));
    }

    let in_data = input.data();
    let k_data = kernels.data();
    let go_data = grad_out.data();

    // Filter gradients: one task per filter; inner sums run in fixed n-major order.
    let mut grad_kernels = Tensor::zeros(&[f, c, KERNEL, KERNEL]);
    let mut grad_bias = Tensor::zeros(&[f]);
    {
        let per_filter = c * KERNEL * KERNEL;
        par::for_each_chunk_mut(grad_kernels.data_mut(), per_filter, |fi, gk_f| {
            for ni in 0..n {
                let go_nf = &go_data[(ni * f + fi) * hp * wp..(ni * f + fi + 1) * hp * wp];
                let in_n = &in_data[ni * c * h * w..(ni + 1) * c * h * w];
                for ci in 0..c {
                    let in_c = &in_n[ci * h * w..(ci + 1) * h * w];
                    for kh in 0..KERNEL {
                        for kw in 0..KERNEL {
                            let mut acc = 0.0;
                            for oh in 0..hp {
                                let ih = (oh * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let in_row = &in_c[ih as usize * w..(ih as usize + 1) * w];
                                let go_row = &go_nf[oh * wp..(oh + 1) * wp];
                                let (lo, hi) = ow_range(wp, w, stride, pad, kw);
                                if lo > hi {
                                    continue;
                                }
                                if stride == 1 {
                                    let base = lo + kw - pad;
                                    for (g, iv) in go_row[lo..=hi]
                                        .iter()
                                        .zip(&in_row[base..base + (hi - lo + 1)])
                                    {
                                        acc += g * iv;
                                    }
                                } else {
                                    for ow in lo..=hi {
                                        acc += go_row[ow] * in_row[ow * stride + kw - pad];
                                    }
                                }
                            }
                            gk_f[ci * KERNEL * KERNEL + kh * KERNEL + kw] += acc;
                        }
                    }
                }
            }
        });
        par::for_each_chunk_mut(grad_bias.data_mut(), 1, |fi, gb| {
            let mut acc = 0.0;
            for ni in 0..n {
                let go_nf = &go_data[(ni * f + fi) * hp * wp..(ni * f + fi + 1) * hp * wp];
                for g in go_nf {
                    acc += g;
                }
            }
            gb[0] = acc;
        });
    }

    // Input gradients: one task per sample.
    let grad_input = if want_input_grad {
        let mut gi = Tensor::zeros(&[n, c, h, w]);
        let sample_in = c * h * w;
        par::for_each_chunk_mut(gi.data_mut(), sample_in, |ni, gi_n| {
            for fi in 0..f {
                let go_nf = &go_data[(ni * f + fi) * hp * wp..(ni * f + fi + 1) * hp * wp];
                for ci in 0..c {
                    let gi_c = &mut gi_n[ci * h * w..(ci + 1) * h * w];
                    let k_fc = &k_data[(fi * c + ci) * KERNEL * KERNEL..];
                    for kh in 0..KERNEL {
                        for kw in 0..KERNEL {
                            let weight = k_fc[kh * KERNEL + kw];
                            if weight == 0.0 {
                                continue;
                            }
                            for oh in 0..hp {
                                let ih = (oh * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let go_row = &go_nf[oh * wp..(oh + 1) * wp];
                                let (lo, hi) = ow_range(wp, w, stride, pad, kw);
                                if lo > hi {
                                    continue;
                                }
                                let gi_row =
                                    &mut gi_c[ih as usize * w..(ih as usize + 1) * w];
                                if stride == 1 {
                                    let base = lo + kw - pad;
                                    for (gv, go) in gi_row[base..base + (hi - lo + 1)]
                                        .iter_mut()
                                        .zip(&go_row[lo..=hi])
                                    {
                                        *gv += weight * go;
                                    }
                                } else {
                                    for ow in lo..=hi {
                                        gi_row[ow * stride + kw - pad] += weight * go_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(gi)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: grad_bias,
    })
}
