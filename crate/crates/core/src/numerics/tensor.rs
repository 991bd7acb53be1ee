//! Dense row-major `f64` tensors and the elementwise/linear-algebra
//! primitives the conditioning math is built from.

use std::io::{Read, Write};

use super::NumericsError;

/// Layer-norm variance floor. Rows whose variance falls below this are
/// normalized with a constant denominator instead of their own variance,
/// which keeps constant rows at exactly zero output.
pub const EPS_LN: f64 = 1e-5;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape {
                op: "new",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row vector `[1 x d]`.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor (leading dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Column count of a 2-D tensor: product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            self.shape.first().copied().unwrap_or(0)
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, NumericsError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn sum(&self) -> f64 {
        kahan_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            kahan_sum(self.data.iter().map(|x| x.abs())) / self.data.len() as f64
        }
    }

    pub fn sum_sq(&self) -> f64 {
        kahan_sum(self.data.iter().map(|x| x * x))
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Standard matrix product for 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                detail: format!("expected 2-D operands, got {:?} x {:?}", self.shape, other.shape),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                detail: format!("inner dimensions disagree: {:?} x {:?}", self.shape, other.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor, NumericsError> {
        if self.shape.len() != 2 {
            return Err(NumericsError::Shape {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Concatenate 2-D (or higher) tensors along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Shape {
            op: "concat_rows",
            detail: "no operands".into(),
        })?;
        let tail_shape = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail_shape {
                return Err(NumericsError::Shape {
                    op: "concat_rows",
                    detail: format!("trailing dims disagree: {:?} vs {:?}", first.shape, p.shape),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail_shape);
        Tensor::new(shape, data)
    }

    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Tensor, NumericsError> {
        if self.shape.is_empty() || hi > self.shape[0] || lo > hi {
            return Err(NumericsError::Shape {
                op: "slice_rows",
                detail: format!("range {}..{} out of {:?}", lo, hi, self.shape),
            });
        }
        let c: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Tensor::new(shape, self.data[lo * c..hi * c].to_vec())
    }

    /// Sample every element i.i.d. from N(0, std^2).
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut super::SeededRng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape, data }
    }

    /// Flat binary dump: `u32` rank, `u64` dims, then little-endian `f64` payload.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> std::io::Result<Tensor> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Tensor { shape, data })
    }
}

/// Neumaier-compensated summation; keeps normalization sums accurate to a
/// few ulp even over tens of thousands of terms.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// Numerically stable ln(1 + e^x).
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Affine-free layer normalization over the last axis, applied row by row.
/// The variance is floored at [`EPS_LN`] so constant rows come out exactly
/// zero; above the floor, rows have mean 0 and variance 1 to float precision.
pub fn layer_norm(x: &Tensor) -> Tensor {
    let c = x.cols().max(1);
    let r = x.len() / c;
    let mut data = vec![0.0; x.len()];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let denom = var.max(EPS_LN).sqrt();
        for j in 0..c {
            data[i * c + j] = (row[j] - mean) / denom;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols().max(1);
    let r = x.len() / c;
    let mut data = vec![0.0; x.len()];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            data[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            data[i * c + j] /= denom;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_head)) V.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, NumericsError> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(NumericsError::Shape {
            op: "softmax_attention",
            detail: "expected 2-D Q, K, V".into(),
        });
    }
    if q.shape()[1] != k.shape()[1] {
        return Err(NumericsError::Shape {
            op: "softmax_attention",
            detail: format!("Q/K feature dims disagree: {:?} vs {:?}", q.shape(), k.shape()),
        });
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(NumericsError::Shape {
            op: "softmax_attention",
            detail: format!("K/V token dims disagree: {:?} vs {:?}", k.shape(), v.shape()),
        });
    }
    let d_head = q.shape()[1] as f64;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / d_head.sqrt());
    softmax_rows(&scores).matmul(v)
}
