//! Dense row-major tensors and the named parameter store.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of `f64` values.
///
/// `grad` is only populated for parameters after a backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Contract(format!("shape {shape:?} holds {expected} values, got {}", values.len())));
        }
        Ok(Self { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, values: vec![0.0; len], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape, values: vec![value; len], grad: None, requires_grad: false }
    }

    /// Builds a `rows x cols` matrix. Panics if the length disagrees.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix {rows}x{cols} needs {} values", rows * cols);
        Self { shape: vec![rows, cols], values, grad: None, requires_grad: false }
    }

    /// A `1 x n` row.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::matrix(1, n, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            values.extend_from_slice(row);
        }
        Self::matrix(r, c, values)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let values = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { shape, values, grad: None, requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading extent when viewed as a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing extent when viewed as a matrix.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// Softmax along `axis` of a matrix, restricted to entries whose `mask` is
/// true. `mask` runs along the softmax axis and is shared by every lane.
///
/// Invalid entries come out as exactly zero.
pub fn masked_softmax(logits: &Tensor, mask: &[bool], axis: usize) -> Result<Tensor> {
    if logits.shape().len() > 2 || axis > 1 {
        return Err(Error::Contract("masked_softmax expects a vector or matrix".into()));
    }
    let t = if logits.shape().len() <= 1 {
        if axis != 0 {
            return Err(Error::Contract("vector softmax only has axis 0".into()));
        }
        Tensor::row(logits.values().to_vec())
    } else if axis == 0 {
        logits.transpose()
    } else {
        logits.clone()
    };
    if mask.len() != t.cols() {
        return Err(Error::Contract(format!("mask length {} does not match axis extent {}", mask.len(), t.cols())));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits in masked_softmax".into()));
    }
    let full_mask: Vec<bool> = (0..t.rows()).flat_map(|_| mask.iter().copied()).collect();
    let mut out = vec![0.0; t.len()];
    softmax_rows(t.values(), &full_mask, t.cols(), &mut out, false)?;
    let out = Tensor::matrix(t.rows(), t.cols(), out);
    Ok(if logits.shape().len() <= 1 {
        Tensor::new(logits.shape().to_vec(), out.into_values())?
    } else if axis == 0 {
        out.transpose()
    } else {
        out
    })
}

/// Row-wise masked softmax kernel shared with the autograd tape. Rows with no
/// valid entry raise `AllMasked`.
pub(crate) fn softmax_rows(logits: &[f64], mask: &[bool], cols: usize, out: &mut [f64], log: bool) -> Result<()> {
    for (r, (row, m)) in logits.chunks(cols).zip(mask.chunks(cols)).enumerate() {
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut argmax = None;
        for (j, (&v, &ok)) in row.iter().zip(m).enumerate() {
            if ok && argmax.is_none_or(|a: usize| v > row[a]) {
                argmax = Some(j);
            }
        }
        let Some(argmax) = argmax else {
            return Err(Error::AllMasked(format!("softmax row {r} has no valid entry")));
        };
        let max = row[argmax];
        // the max term is exactly 1; summing the rest separately keeps
        // log(1 + rest) accurate when rest is tiny
        let mut rest = 0.0;
        for (j, ((d, &v), &ok)) in dst.iter_mut().zip(row).zip(m).enumerate() {
            *d = if ok { (v - max).exp() } else { 0.0 };
            if j != argmax {
                rest += *d;
            }
        }
        let total = 1.0 + rest;
        if log {
            let log_total = rest.ln_1p();
            for ((d, &v), &ok) in dst.iter_mut().zip(row).zip(m) {
                *d = if ok { v - max - log_total } else { 0.0 };
            }
        } else {
            dst.iter_mut().for_each(|d| *d /= total);
        }
    }
    Ok(())
}

/// Standardizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Contract(format!(
            "layer_norm width {cols} but gain/bias have {}/{}",
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Contract("layer_norm eps must be positive".into()));
    }
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.values().chunks(cols).zip(out.chunks_mut(cols)) {
        let (_, inv_std) = row_moments(src, eps);
        let mean = src.iter().sum::<f64>() / cols as f64;
        for (j, d) in dst.iter_mut().enumerate() {
            *d = (src[j] - mean) * inv_std * gain.values()[j] + bias.values()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns (mean, 1/sqrt(var + eps)) of one row, population variance.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(true);
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}
