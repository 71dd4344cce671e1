//! Dense `f32` tensors and the elementary arithmetic every merge reduces to.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("tensor contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0} tensors but {1} coefficients")]
    CoeffCount(usize, usize),
    #[error("cannot combine an empty list of tensors")]
    Empty,
    #[error("coefficient {0} is not finite")]
    NonFiniteCoeff(f64),
    #[error("adapter shapes incompatible: base {base:?}, lora_a {a:?}, lora_b {b:?}, rank {rank}")]
    AdapterShape {
        base: Vec<usize>,
        a: Vec<usize>,
        b: Vec<usize>,
        rank: usize,
    },
}

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the element count and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                expected,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Little-endian byte image of the data.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .fold(0.0, f64::max))
    }
}

/// Elementwise `Σ coeffs[i] · tensors[i]`.
///
/// Accumulates in `f64`, strictly left to right in argument order, then rounds
/// once to `f32`. The fixed order makes the result bit-reproducible.
pub fn weighted_sum(tensors: &[&Tensor], coeffs: &[f64]) -> Result<Tensor, TensorError> {
    let first = tensors.first().ok_or(TensorError::Empty)?;
    if tensors.len() != coeffs.len() {
        return Err(TensorError::CoeffCount(tensors.len(), coeffs.len()));
    }
    if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
        return Err(TensorError::NonFiniteCoeff(*c));
    }
    for t in &tensors[1..] {
        if t.shape != first.shape {
            return Err(TensorError::ShapeMismatch {
                left: first.shape.clone(),
                right: t.shape.clone(),
            });
        }
    }
    let mut acc = vec![0.0f64; first.len()];
    for (t, &c) in tensors.iter().zip(coeffs) {
        for (a, &v) in acc.iter_mut().zip(&t.data) {
            *a += c * f64::from(v);
        }
    }
    Tensor::new(first.shape.clone(), acc.into_iter().map(|v| v as f32).collect())
}

/// Uniform average; the same code path as [`weighted_sum`] with `1/n` coefficients.
pub fn average(tensors: &[&Tensor]) -> Result<Tensor, TensorError> {
    if tensors.is_empty() {
        return Err(TensorError::Empty);
    }
    weighted_sum(tensors, &uniform_coeffs(tensors.len()))
}

pub fn uniform_coeffs(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// LoRA scaling factor `alpha / r`.
pub fn adapter_scale(rank: usize, alpha: f64) -> f64 {
    alpha / rank as f64
}

/// The effective weight delta `(alpha / r) · B · A`, in `f64`.
pub fn adapter_delta(
    lora_a: &Tensor,
    lora_b: &Tensor,
    rank: usize,
    alpha: f64,
) -> Result<(usize, usize, Vec<f64>), TensorError> {
    let bad = || TensorError::AdapterShape {
        base: vec![],
        a: lora_a.shape.clone(),
        b: lora_b.shape.clone(),
        rank,
    };
    let (ar, d_in) = lora_a.dims2().ok_or_else(bad)?;
    let (d_out, br) = lora_b.dims2().ok_or_else(bad)?;
    if ar != rank || br != rank {
        return Err(bad());
    }
    let scale = adapter_scale(rank, alpha);
    let mut delta = vec![0.0f64; d_out * d_in];
    for i in 0..d_out {
        let row = &mut delta[i * d_in..(i + 1) * d_in];
        for k in 0..rank {
            let b = f64::from(lora_b.data[i * rank + k]) * scale;
            if b == 0.0 {
                continue;
            }
            let a_row = &lora_a.data[k * d_in..(k + 1) * d_in];
            for (r, &a) in row.iter_mut().zip(a_row) {
                *r += b * f64::from(a);
            }
        }
    }
    Ok((d_out, d_in, delta))
}

/// `base + (alpha / r) · lora_b · lora_a`.
pub fn materialize_adapter(
    base: &Tensor,
    lora_a: &Tensor,
    lora_b: &Tensor,
    rank: usize,
    alpha: f64,
) -> Result<Tensor, TensorError> {
    let err = || TensorError::AdapterShape {
        base: base.shape.clone(),
        a: lora_a.shape.clone(),
        b: lora_b.shape.clone(),
        rank,
    };
    let (d_out, d_in) = base.dims2().ok_or_else(err)?;
    if lora_a.shape != [rank, d_in] || lora_b.shape != [d_out, rank] {
        return Err(err());
    }
    let (_, _, delta) = adapter_delta(lora_a, lora_b, rank, alpha)?;
    let data = base
        .data
        .iter()
        .zip(&delta)
        .map(|(&w, &d)| (f64::from(w) + d) as f32)
        .collect();
    Tensor::new(base.shape.clone(), data)
}
