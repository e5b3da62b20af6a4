//! Dense row-major tensors over a switchable real scalar (f32 for training,
//! f64 for gradient checks).

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the numeric core is generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn cast(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense n-dimensional array in row-major order.
///
/// `grad` is populated by [`crate::tape::Tape::backward`] for leaves that
/// were created with `requires_grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite value in tensor data"));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D tensor from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("from_rows: no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("from_rows: ragged rows"));
        }
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Last-axis extent.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn leading(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Lossy precision conversion (f32 <-> f64) preserving shape and flags.
    pub fn convert<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::cast(v.as_f64())).collect()),
        }
    }
}

/// Identity matrix of extent `n`.
pub fn eye<T: Real>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = T::one();
    }
    t
}
