//! Dense f32 tensors and the primitive operations of the forward pass.
//!
//! Tensors are immutable after construction; the payload sits behind an
//! `Arc` so clones are cheap and traces can share storage with the pass
//! that produced them. All reductions that feed metrics accumulate in
//! f64; the stored values stay f32.

use std::sync::Arc;

use crate::{Error, Result};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    /// Builds a tensor, checking that the payload length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2-D matrix (`[rows, cols]`).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// One row of the 2-D view.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Replaces whole rows, producing a new tensor. `rows` pairs a row
    /// index with its replacement slice (length = cols).
    pub fn with_rows_replaced(&self, rows: &[(usize, &[f32])]) -> Result<Tensor> {
        let c = self.cols();
        let n_rows = self.rows();
        let mut out = self.data.as_ref().clone();
        for &(i, new_row) in rows {
            if i >= n_rows {
                return Err(Error::input(format!(
                    "row {i} out of range for {n_rows} rows"
                )));
            }
            if new_row.len() != c {
                return Err(Error::shape(format!(
                    "replacement row has {} entries, expected {c}",
                    new_row.len()
                )));
            }
            out[i * c..(i + 1) * c].copy_from_slice(new_row);
        }
        Tensor::new(self.shape.clone(), out)
    }

    fn require_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{what} needs a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Matrix product `self[m,k] · rhs[k,n]`, accumulated in f32.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul lhs")?;
        let (k2, n) = rhs.require_2d("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {k} vs {k2}"
            )));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (t, &a_it) in a_row.iter().enumerate() {
                let b_row = &b[t * n..(t + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c += a_it * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self[m,k] · rhsᵀ` where `rhs` is `[n,k]`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul_nt lhs")?;
        let (n, k2) = rhs.require_2d("matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dimensions disagree: {k} vs {k2}"
            )));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · rhs` where `self` is `[m,k]` and `rhs` is `[m,n]`.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul_tn lhs")?;
        let (m2, n) = rhs.require_2d("matmul_tn rhs")?;
        if m != m2 {
            return Err(Error::shape(format!(
                "matmul_tn outer dimensions disagree: {m} vs {m2}"
            )));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0f32; k * n];
        for t in 0..m {
            let a_row = &a[t * k..(t + 1) * k];
            let b_row = &b[t * n..(t + 1) * n];
            for (i, &a_ti) in a_row.iter().enumerate() {
                let c_row = &mut out[i * n..(i + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c += a_ti * bv;
                }
            }
        }
        Tensor::new(vec![k, n], out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    fn zip_with(&self, rhs: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, rhs.shape
            )));
        }
        let out = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), out)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let out = self.data.iter().map(|&x| x * c).collect();
        Tensor::new(self.shape.clone(), out).expect("shape unchanged")
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let out = self.data.iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::new(self.shape.clone(), out).expect("shape unchanged")
    }

    /// Root-mean-square normalization over the last dimension:
    /// `out[i] = x[i] / sqrt(mean(x^2) + eps) * scale[i]`.
    pub fn rmsnorm(&self, scale: &Tensor, eps: f32) -> Result<Tensor> {
        let d = self.cols();
        if scale.shape() != [d] {
            return Err(Error::shape(format!(
                "rmsnorm scale has shape {:?}, expected [{d}]",
                scale.shape()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::input(format!("rmsnorm eps must be positive, got {eps}")));
        }
        let s = scale.data();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(d) {
            let mut ssq = 0.0f32;
            for &x in row {
                ssq += x * x;
            }
            let inv = 1.0 / (ssq / d as f32 + eps).sqrt();
            for (&x, &sc) in row.iter().zip(s) {
                out.push(x * inv * sc);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Row-wise softmax over the last dimension, stabilized by
    /// max-subtraction.
    pub fn softmax(&self) -> Tensor {
        let d = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(d) {
            softmax_row(row, &mut out);
        }
        Tensor::new(self.shape.clone(), out).expect("shape unchanged")
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Tensor {
        let d = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(d) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for &x in row {
                denom += (x - max).exp();
            }
            let lse = max + denom.ln();
            for &x in row {
                out.push(x - lse);
            }
        }
        Tensor::new(self.shape.clone(), out).expect("shape unchanged")
    }

    /// Softmax over a square score matrix where row `i` may only attend
    /// to columns `0..=i`; masked entries come out exactly 0.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let (n, m) = self.require_2d("causal_softmax")?;
        if n != m {
            return Err(Error::shape(format!(
                "causal_softmax needs a square matrix, got [{n}, {m}]"
            )));
        }
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let row = &self.data[i * m..i * m + i + 1];
            let mut buf = Vec::with_capacity(i + 1);
            softmax_row(row, &mut buf);
            out[i * m..i * m + i + 1].copy_from_slice(&buf);
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Rotary position embedding applied per row (row index = position)
    /// and per head. Pairs the first and second halves of each head.
    pub fn rotary(&self, n_heads: usize, base: f32) -> Result<Tensor> {
        let d = self.cols();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(format!(
                "rotary: width {d} not divisible into {n_heads} heads"
            )));
        }
        let d_head = d / n_heads;
        if d_head % 2 != 0 {
            return Err(Error::shape(format!(
                "rotary: head dimension {d_head} must be even"
            )));
        }
        let half = d_head / 2;
        let mut out = self.data.as_ref().clone();
        for (pos, row) in out.chunks_exact_mut(d).enumerate() {
            for h in 0..n_heads {
                let head = &mut row[h * d_head..(h + 1) * d_head];
                for i in 0..half {
                    let theta = pos as f32 / base.powf(2.0 * i as f32 / d_head as f32);
                    let (sin, cos) = theta.sin_cos();
                    let u = head[i];
                    let v = head[i + half];
                    head[i] = u * cos - v * sin;
                    head[i + half] = u * sin + v * cos;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Inverse of [`Tensor::rotary`]; used by the backward pass.
    pub(crate) fn rotary_inverse(&self, n_heads: usize, base: f32) -> Result<Tensor> {
        let d = self.cols();
        let d_head = d / n_heads;
        let half = d_head / 2;
        let mut out = self.data.as_ref().clone();
        for (pos, row) in out.chunks_exact_mut(d).enumerate() {
            for h in 0..n_heads {
                let head = &mut row[h * d_head..(h + 1) * d_head];
                for i in 0..half {
                    let theta = pos as f32 / base.powf(2.0 * i as f32 / d_head as f32);
                    let (sin, cos) = theta.sin_cos();
                    let u = head[i];
                    let v = head[i + half];
                    head[i] = u * cos + v * sin;
                    head[i + half] = -u * sin + v * cos;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Column slice `[.., start..start+len]` of the 2-D view.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of range for width {c}",
                start + len
            )));
        }
        let r = self.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor::new(vec![r, len], out)
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero tensors".to_string()));
        }
        let r = parts[0].rows();
        if parts.iter().any(|p| p.rows() != r) {
            return Err(Error::shape("concat_cols: row counts differ".to_string()));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(vec![r, total], out)
    }

    /// Sum of all entries, accumulated in f64, returned as an f32 scalar
    /// tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data.iter().map(|&x| x as f64).sum();
        Tensor::scalar(s as f32)
    }

    /// Maximum absolute difference against another tensor of equal shape.
    pub fn max_abs_diff(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "max_abs_diff: shapes {:?} and {:?} differ",
                self.shape, rhs.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

fn softmax_row(row: &[f32], out: &mut Vec<f32>) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let start = out.len();
    let mut denom = 0.0f32;
    for &x in row {
        let e = (x - max).exp();
        denom += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= denom;
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Cosine similarity of two equal-length vectors, accumulated in f64 and
/// clamped to [-1, 1]. When either norm falls below 1e-12 the result is
/// defined as 0 ("no directional relationship").
pub fn cosim(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosim: lengths {} and {} differ",
            u.len(),
            v.len()
        )));
    }
    Ok(cosim_slices(u.data(), v.data()))
}

/// Slice form of [`cosim`]; callers must pass equal lengths.
pub fn cosim_slices(u: &[f32], v: &[f32]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Euclidean norm of the elementwise difference of two slices, in f64.
pub fn l2_diff(u: &[f32], v: &[f32]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Euclidean norm of a slice, in f64.
pub fn l2_norm(u: &[f32]) -> f64 {
    u.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt()
}
