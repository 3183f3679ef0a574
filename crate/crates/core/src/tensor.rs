//! Dense row-major `f64` tensors and the value-level kernels the autodiff
//! tape is built from.

use crate::error::{LabError, Result};
use crate::instrument::add_flops;
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(LabError::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(LabError::Format("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![m, n],
            data: rows.concat(),
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Independent `N(0, std^2)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.uniform_range(lo, hi)).collect(),
        }
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(LabError::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(LabError::dim(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(LabError::dim(op, &a.shape, &b.shape));
    }
    Ok(())
}

/// `c = a * b` where `a` is `m x k` and `b` is `k x n`, both addressed
/// through (row, column) strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides address exactly the `m x k` and `k x n`
        // elements of `a` and `b`, and `out` holds `m * n` elements.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    add_flops(2 * (m * k * n) as u64);
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(LabError::dim("matmul", &a.shape, &b.shape));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1)),
    })
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul_nt")?;
    let (n, k2) = b.require_matrix("matmul_nt")?;
    if k != k2 {
        return Err(LabError::dim("matmul_nt", &a.shape, &b.shape));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (1, k as isize)),
    })
}

/// `a^T * b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.require_matrix("matmul_tn")?;
    let (k2, n) = b.require_matrix("matmul_tn")?;
    if k != k2 {
        return Err(LabError::dim("matmul_tn", &a.shape, &b.shape));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: gemm(m, k, n, &a.data, (1, m as isize), &b.data, (n as isize, 1)),
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_matrix("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

fn zip_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    same_shape(op, a, b)?;
    add_flops(a.len() as u64);
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    add_flops(a.len() as u64);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x * s)
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    map(a, sigmoid_scalar)
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| x.max(0.0))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_matrix("softmax_rows")?;
    if a.data.iter().any(|x| x.is_nan()) {
        return Err(LabError::Numeric("NaN input to softmax_rows".into()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - mx).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    add_flops(5 * (m * n) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| LabError::Config("concat_rows of nothing".into()))?;
    let n = first.cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        p.require_matrix("concat_rows")?;
        if p.cols() != n {
            return Err(LabError::dim("concat_rows", &first.shape, &p.shape));
        }
        rows += p.rows();
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, n],
        data,
    })
}

pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = a.require_matrix("slice_rows")?;
    if start > end || end > m {
        return Err(LabError::dim("slice_rows", &a.shape, &[start, end]));
    }
    Ok(Tensor {
        shape: vec![end - start, n],
        data: a.data[start * n..end * n].to_vec(),
    })
}

pub fn select_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (m, n) = a.require_matrix("select_rows")?;
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        if i >= m {
            return Err(LabError::dim("select_rows", &a.shape, &[i]));
        }
        data.extend_from_slice(&a.data[i * n..(i + 1) * n]);
    }
    Ok(Tensor {
        shape: vec![idx.len(), n],
        data,
    })
}

pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = a.require_matrix("slice_cols")?;
    if start > end || end > n {
        return Err(LabError::dim("slice_cols", &a.shape, &[start, end]));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(m * w);
    for i in 0..m {
        data.extend_from_slice(&a.data[i * n + start..i * n + end]);
    }
    Ok(Tensor {
        shape: vec![m, w],
        data,
    })
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| LabError::Config("concat_cols of nothing".into()))?;
    let m = first.rows();
    for p in parts {
        p.require_matrix("concat_cols")?;
        if p.rows() != m {
            return Err(LabError::dim("concat_cols", &first.shape, &p.shape));
        }
    }
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Column means, `m x n -> 1 x n`.
pub fn mean_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_matrix("mean_rows")?;
    if m == 0 {
        return Err(LabError::dim("mean_rows", &a.shape, &[1, n]));
    }
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, &x) in out.iter_mut().zip(&a.data[i * n..(i + 1) * n]) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= m as f64;
    }
    add_flops((m * n) as u64);
    Ok(Tensor {
        shape: vec![1, n],
        data: out,
    })
}

/// Scales each row to unit Euclidean norm. Zero rows are a numeric error.
pub fn l2_normalize_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_matrix("l2_normalize_rows")?;
    let mut data = a.data.clone();
    for i in 0..m {
        let row = &mut data[i * n..(i + 1) * n];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(LabError::Numeric(format!("row {i} has norm {norm}")));
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
    }
    add_flops((3 * m * n) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Repeats a `1 x n` row `m` times.
pub fn broadcast_rows(a: &Tensor, m: usize) -> Result<Tensor> {
    let (r, n) = a.require_matrix("broadcast_rows")?;
    if r != 1 {
        return Err(LabError::dim("broadcast_rows", &a.shape, &[1, n]));
    }
    let mut data = Vec::with_capacity(m * n);
    for _ in 0..m {
        data.extend_from_slice(&a.data);
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Repeats an `m x 1` column `n` times.
pub fn broadcast_cols(a: &Tensor, n: usize) -> Result<Tensor> {
    let (m, c) = a.require_matrix("broadcast_cols")?;
    if c != 1 {
        return Err(LabError::dim("broadcast_cols", &a.shape, &[m, 1]));
    }
    let mut data = Vec::with_capacity(m * n);
    for &x in &a.data {
        data.extend(std::iter::repeat_n(x, n));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
