use crate::error::{Error, Result};

/// Row-major array of `f64` with an explicit shape and an optional gradient
/// buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Interprets the tensor as `[rows, last_dim]`.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Allocates a zeroed gradient buffer if there is none yet.
    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }
}
