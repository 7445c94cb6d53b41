//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations on values owned by the graph or borrowed
//! from a [`ParamStore`]. [`Graph::backward`] walks the tape once and returns
//! [`Gradients`] for every trainable parameter that took part; [`Adam`]
//! consumes them. Everything is generic over [`Scalar`] so the same layers run
//! in `f32` for training and in `f64` for gradient checks.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;

pub use adam::Adam;
pub use graph::{BatchStats, Graph, Groups, NodeId};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
