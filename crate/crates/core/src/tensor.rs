//! Dense multi-dimensional real arrays.
//!
//! A [`Tensor`] is a row-major `f64` buffer plus a shape of rank 1..=3.
//! Tensors created by [`crate::tape::Tape`] operations additionally carry a
//! handle into the tape that produced them, so gradients can be read back
//! after a backward pass. Tensors without a handle are plain values and move
//! freely between threads.

use thiserror::Error;

/// Index of a recorded node inside a tape.
pub type NodeId = usize;

/// Handle tying a tensor to the tape node that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: NodeId,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: row {row} has near-zero norm {norm:e}")]
    DegenerateRow {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotAScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("tensor belongs to a different tape")]
    ForeignTape,
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("rank {0} unsupported (rank must be 1..=3)")]
    UnsupportedRank(usize),
}

/// Dense row-major array of 64-bit reals, rank 1..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::UnsupportedRank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Single row matrix `1 x n`.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![1, n],
            data,
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotAScalar {
                op: "scalar_value",
                shape: self.shape.clone(),
            })
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(TensorError::NotAMatrix {
                op,
                shape: self.shape.clone(),
            })
        }
    }

    /// Element of a rank-2 tensor; panics on out-of-range (test helper).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the value without any tape handle.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f64>, node: NodeRef) -> Tensor {
        Tensor {
            shape,
            data,
            node: Some(node),
        }
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeDataMismatch { .. })
        ));
    }

    #[test]
    fn rank_bounds() {
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(matches!(
            Tensor::new(vec![], vec![]),
            Err(TensorError::UnsupportedRank(0))
        ));
        assert!(matches!(
            Tensor::new(vec![1, 1, 1, 1], vec![0.0]),
            Err(TensorError::UnsupportedRank(4))
        ));
    }

    #[test]
    fn scalar_accessors() {
        let s = Tensor::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 4.25);
        let m = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(m.scalar_value().is_err());
    }
}
