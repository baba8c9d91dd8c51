//! Dense tensors and the reverse-mode tape.
//!
//! Only the operators the pruning pipeline needs are implemented. Values are
//! stored as f64 so finite-difference gradient checks stay tight; the model
//! container decides the on-disk precision.

mod tape;

pub mod gradcheck;
pub mod optim;

pub use optim::SgdMomentum;
pub use tape::{Gradients, Op, Tape, Var};

use crate::error::{Error, Result};
use std::fmt;

/// Stable identifier for a trainable parameter, e.g. `conv2.weight`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(layer: &str, role: &str) -> Self {
        ParamId(format!("{layer}.{role}"))
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Plain dense value: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::from_vec", n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Extent along `axis`, or 1 past the rank.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Row-major offset for a 4-d index.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn idx2(&self, n: usize, c: usize) -> usize {
        n * self.shape[1] + c
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A trainable (or frozen) parameter living outside any tape.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub value: Tensor,
    pub requires_grad: bool,
}

impl Param {
    pub fn new(id: ParamId, value: Tensor) -> Self {
        Param {
            id,
            value,
            requires_grad: true,
        }
    }

    pub fn frozen(id: ParamId, value: Tensor) -> Self {
        Param {
            id,
            value,
            requires_grad: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![1.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![1.0; 6]).is_ok());
    }

    #[test]
    fn scalar_shape() {
        let t = Tensor::scalar(4.5);
        assert!(t.is_scalar());
        assert_eq!(t.data[0], 4.5);
    }
}
