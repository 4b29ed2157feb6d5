//! Dense numeric arrays with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable shaped array of `f32` or `f64`. Operations on
//! tensors that are tracked on a [`Tape`] record enough state for
//! [`backward`] to return gradients with respect to every watched leaf.
//! The tape is single-threaded and consumed by the backward pass; independent
//! training runs use independent tapes.

mod adam;
mod checkpoint;
pub(crate) mod kernels;
mod ops;
mod tape;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{read_tensors, write_tensors, CKP_MAGIC};
pub use ops::{
    add, add_scalar, channel_affine, clamp, conv2d, conv_transpose2d, dropout, linear, maxpool2,
    mean_groups, mse_loss, mul, reshape, scale, scale_channels, spike, sub, sum, tanh,
};
pub use tape::{backward, Gradients, Tape};

use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar: num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef<S: Scalar> {
    pub(crate) tape: Tape<S>,
    pub(crate) id: usize,
}

/// Immutable shaped array, optionally tracked on a tape.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeRef<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::zero(); numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// Uniform random tensor on `[lo, hi)`; draws exactly `numel` values.
    pub fn rand_uniform<R: rand::Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("item() on tensor with {} elements", self.data.len()),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no tape node.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Replaces the stored values, keeping the shape. Used by the optimizer;
    /// never valid on a tracked tensor.
    pub(crate) fn with_data(&self, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), self.numel());
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        }
    }

    /// Cast between scalar types (f32 <-> f64). Drops tape tracking.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.into_f64())).collect()),
            node: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}[{} elems{}]",
            self.shape,
            self.data.len(),
            if self.node.is_some() { ", tracked" } else { "" }
        )
    }
}

/// Expects a 4-D shape and returns it as a tuple.
pub(crate) fn dims4<S: Scalar>(t: &Tensor<S>, what: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(Error::Dimension {
            axis: what,
            detail: format!("expected 4-D tensor, got shape {:?}", s),
        }),
    }
}

pub(crate) fn dims2<S: Scalar>(t: &Tensor<S>, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::Dimension {
            axis: what,
            detail: format!("expected 2-D tensor, got shape {:?}", s),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, -2.5, 0.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t.data(), back.data());
    }
}
