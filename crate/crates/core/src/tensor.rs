//! Dense row-major `f64` tensors and the handful of numeric primitives the
//! rest of the crate is built from.
//!
//! Every constructor rejects non-finite values, and operations that could
//! produce them report an error instead of returning a poisoned tensor.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Add,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|_| shape.iter().all(|&d| d > 0));
        if numel != Some(data.len()) {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor holding `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Applies `f` elementwise, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self[i] op scale * other[i]`.
    pub fn combine(&self, other: &Tensor, op: Combine, scale: f64) -> Result<Self> {
        elementwise_combine(self, other, op, scale)
    }

    pub fn norm(&self, kind: Norm) -> Result<f64> {
        norm(&self.data, kind)
    }
}

pub fn elementwise_combine(a: &Tensor, b: &Tensor, op: Combine, scale: f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let data: Vec<f64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match op {
            Combine::Add => x + scale * y,
            Combine::Sub => x - scale * y,
        })
        .collect();
    check_finite(&data)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn norm(v: &[f64], kind: Norm) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("norm of an empty vector"));
    }
    let value = match kind {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    };
    if !value.is_finite() {
        return Err(Error::InvalidArgument("norm overflowed".into()));
    }
    Ok(value)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `z / temperature`, stabilised by subtracting the maximum.
pub fn softmax_temp(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if z.is_empty() {
        return Err(Error::Empty("softmax of an empty vector"));
    }
    check_finite(z)?;
    let scaled: Vec<f64> = z.iter().map(|&v| v / temperature).collect();
    check_finite(&scaled)?;
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
