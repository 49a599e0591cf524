//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable value: a shape plus a shared row-major
//! buffer. Tensors that take part in differentiation carry a handle to a
//! node on a [`Tape`]; everything else is a constant. Operations live on the
//! tape (`tape.matmul(&a, &b)`), and an operation whose inputs are all
//! constants records nothing and retains nothing.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_floored, grad_check_many, relative_error, GradComparison,
};
pub use tape::{Gradients, NodeRef, Tape};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
    parameter: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        if shape.len() > 4 {
            return Err(Error::Contract(format!(
                "tensors are at most rank 4, got shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
            parameter: false,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            parameter: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Builds a 2-D tensor from row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal(std)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.trunc_normal(std)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Marks this tensor as model parameter storage. Parameters live for the
    /// whole run, so retaining one for backward costs no activation memory.
    pub fn into_parameter(mut self) -> Self {
        self.parameter = true;
        self
    }

    pub fn is_parameter(&self) -> bool {
        self.parameter
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            parameter: self.parameter,
        }
    }

    /// Copy with a fresh buffer, used when a value must not alias another.
    pub fn deep_copy(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.as_ref().clone()),
            node: None,
            parameter: self.parameter,
        }
    }

    /// Returns a copy with `f` applied to every element. Constant result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        );
        out.parameter = self.parameter;
        out
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
            parameter: self.parameter,
        })
    }

    /// `(rows, cols)` of a matrix view; vectors are one row and scalars 1×1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.numel() / cols.max(1), cols)
            }
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn buffer(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.numel() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad())
            .field("parameter", &self.parameter)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_must_match_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rank_is_capped_at_four() {
        assert!(Tensor::new(&[1, 1, 1, 1], vec![0.0]).is_ok());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn constants_do_not_require_grad() {
        let t = Tensor::ones(&[2, 2]);
        assert!(!t.requires_grad());
        assert_eq!(t.dims2(), (2, 2));
        assert_eq!(Tensor::scalar(3.0).item(), 3.0);
    }
}
