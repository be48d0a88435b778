//! Dense row-major tensors, the currency of all computation.

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wrap a flat buffer, checking `len(data) == product(shape)`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let need: usize = shape.iter().product();
        if data.len() != need {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (need {})",
                data.len(),
                shape,
                need
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of dimension `i`; panics if out of range.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Reshape by move, reusing the buffer.
    pub fn into_reshaped(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// True when every element is bit-identical to `other`'s.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A trainable tensor: value, gradient buffer, and a freeze flag.
///
/// When `frozen` is set, no optimizer step may touch `value`.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

impl ParamTensor {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        ParamTensor {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_shape() {
        let t = Tensor::from_vec(&[], vec![3.5]).unwrap();
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn bits_eq_distinguishes_signed_zero() {
        let a = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![-0.0]).unwrap();
        assert_eq!(a, b); // == on f64 treats 0.0 == -0.0
        assert!(!a.bits_eq(&b));
    }

    #[test]
    fn param_tensor_grad_matches_shape() {
        let p = ParamTensor::new(Tensor::zeros(&[4, 3]));
        assert_eq!(p.value.shape(), p.grad.shape());
        assert!(!p.frozen);
    }
}
