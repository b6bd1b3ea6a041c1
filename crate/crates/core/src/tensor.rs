//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    ///
    /// Fails with a dimension error when the value count does not match the
    /// shape, and with a domain error on NaN or infinite input.
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero-sized axis")));
        }
        if values.len() != numel(shape) {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {} at index {pos}", values[pos])));
        }
        Ok(Self::from_parts(shape.to_vec(), values))
    }

    /// Internal constructor; callers guarantee `data.len() == product(shape)`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and weight surgery. Shape is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a 2-D tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient has {} elements, tensor has {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_parts(vec![c, r], crate::kernels::transpose(&self.data, r, c)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self::from_parts(vec![m, n], crate::kernels::matmul(&self.data, &other.data, m, k, n)))
    }

    /// Column `col` of a 2-D tensor.
    pub fn column(&self, col: usize) -> Vec<f64> {
        let cols = self.shape[1];
        (0..self.shape[0]).map(|r| self.data[r * cols + col]).collect()
    }

    /// Keeps the selected columns of a 2-D tensor, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::dim(format!("column {bad} out of range for {c} columns")));
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for row in 0..r {
            out.extend(cols.iter().map(|&j| self.data[row * c + j]));
        }
        Ok(Self::from_parts(vec![r, cols.len()], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
