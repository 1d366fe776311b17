//! Dense row-major `f64` tensors and the small set of kernels the model needs.

use std::fmt;

use super::NumericsError;

/// A dense, row-major tensor of `f64` values.
///
/// Every constructor and kernel rejects non-finite values, so a `Tensor` that
/// exists is always finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NumericsError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if numel(&shape) != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, NumericsError> {
        let n = numel(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![data.len()], data)
    }

    /// Stacks equal-length rows into a 2-D tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(NumericsError::RankMismatch {
                op,
                expected: 2,
                got: self.shape.len(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    /// Borrow row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        if numel(&shape) != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        check_finite(op, &data)?;
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor, NumericsError> {
        let data: Vec<f64> = self.data.iter().map(|v| f(*v)).collect();
        check_finite(op, &data)?;
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, k: f64) -> Result<Tensor, NumericsError> {
        self.map("scale", |v| v * k)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, k) = self.require_matrix("matmul")?;
        let (k2, m) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor, NumericsError> {
        let (n, m) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Euclidean norm of each row of a 2-D tensor.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| l2_norm(self.row(i))).collect()
    }

    /// Column-wise mean of a 2-D tensor.
    pub fn mean_rows(&self) -> Result<Vec<f64>, NumericsError> {
        let (n, d) = self.require_matrix("mean_rows")?;
        if n == 0 {
            return Err(NumericsError::Empty { op: "mean_rows" });
        }
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; a zero-norm operand is a `DegenerateVector` error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::DegenerateVector { op: "cosine" });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Numerically stable softmax over a logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Empty { op: "softmax" });
    }
    check_finite("softmax", logits)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}
