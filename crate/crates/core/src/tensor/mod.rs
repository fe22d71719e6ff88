//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value type. Differentiable computation happens on a
//! [`Tape`], which records every primitive application and is consumed by
//! [`Tape::backward`].

mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by primitive `{primitive}`")]
    NonFinite { primitive: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Sum of squares, accumulated in row-major order.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every entry through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }
}

fn strides_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(TensorError::Contract("softmax of an empty tensor".into()));
    }
    if axis >= logits.shape.len() {
        return Err(TensorError::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            logits.shape
        )));
    }
    let (outer, len, inner) = strides_around(&logits.shape, axis);
    let mut out = logits.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| logits.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (logits.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    let out = Tensor::new(logits.shape.clone(), out)?;
    if !out.is_finite() {
        return Err(TensorError::NonFinite { primitive: "softmax" });
    }
    Ok(out)
}

/// Layer normalization over the last axis: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let width = *x
        .shape
        .last()
        .ok_or_else(|| TensorError::Contract("layer_norm of a rank-0 tensor".into()))?;
    if gamma.len() != width || beta.len() != width {
        return Err(TensorError::Contract(format!(
            "layer_norm: gamma/beta length {}/{} does not match last axis {width}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 {
        return Err(TensorError::Contract("layer_norm eps must be positive".into()));
    }
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_rows(&x.data, &gamma.data, &beta.data, width, eps, &mut out, None);
    let out = Tensor::new(x.shape.clone(), out)?;
    if !out.is_finite() {
        return Err(TensorError::NonFinite {
            primitive: "layer_norm",
        });
    }
    Ok(out)
}
