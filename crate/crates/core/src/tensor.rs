//! Dense row-major tensors with an optional gradient slot.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; the gradient
/// oracles run the same code paths in `f64`.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::validation(format!(
                "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    /// Builds a `[rows.len(), width]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::Dimension {
                op: "from_rows",
                left: vec![width],
                right: vec![bad.len()],
            });
        }
        Self::new(
            vec![rows.len(), width],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Leading dimension, the batch size for batched tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        self.values.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op: "as_matrix",
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Self::new(shape, self.values.clone())
    }

    /// Gathers leading-dimension slices in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::validation("select_rows needs at least one index"));
        }
        let w = self.row_len();
        let mut values = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::validation(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, values)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Copy of the tensor without its gradient slot.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: None,
        }
    }
}
