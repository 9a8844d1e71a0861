//! Dense tensors, matrices, and tensor trains in row-major storage.
//!
//! A tensor train represents a d-way array through a chain of order-3 cores
//! G(1)..G(d), where core l has shape (r_{l-1}, n_l, r_l) and the boundary
//! ranks are r_0 = r_d = 1. An element is the chain product
//! `G(1)[:, i_1, :] * G(2)[:, i_2, :] * ... * G(d)[:, i_d, :]`, which
//! collapses to a scalar because of the boundary ranks. Everything in
//! this crate agrees on row-major (last index fastest) element order, so an
//! unfolding is a reinterpretation of the same buffer, never a data movement.

use crate::error::{NttError, Result};

/// Converts a multi-index to the row-major flat position.
pub fn multi_to_flat(index: &[usize], shape: &[usize]) -> usize {
    debug_assert_eq!(index.len(), shape.len());
    let mut flat = 0;
    for (i, n) in index.iter().zip(shape) {
        debug_assert!(i < n);
        flat = flat * n + i;
    }
    flat
}

/// Converts a row-major flat position to a multi-index, writing into `out`.
pub fn flat_to_multi(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    debug_assert_eq!(out.len(), shape.len());
    for k in (0..shape.len()).rev() {
        out[k] = flat % shape[k];
        flat /= shape[k];
    }
    debug_assert_eq!(flat, 0);
}

/// A dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NttError::Dimension(format!(
                "matrix {rows}x{cols} expects {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self * other. Accumulation runs over k in ascending order for every
    /// output entry, so the result is identical across runs.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NttError::Dimension(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self * other^T.
    pub fn matmul_abt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(NttError::Dimension(format!(
                "matmul_abt: {}x{} times ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// self^T * other.
    pub fn matmul_atb(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(NttError::Dimension(format!(
                "matmul_atb: ({}x{})^T times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &other.data[k * other.cols..(k + 1) * other.cols];
            for i in 0..self.cols {
                let a = arow[i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// Sum of |entry| per column.
    pub fn col_abs_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v.abs();
            }
        }
        sums
    }

    pub fn scale_cols(&mut self, factors: &[f64]) {
        debug_assert_eq!(factors.len(), self.cols);
        for i in 0..self.rows {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
    }

    pub fn scale_rows(&mut self, factors: &[f64]) {
        debug_assert_eq!(factors.len(), self.rows);
        for i in 0..self.rows {
            let f = factors[i];
            for v in self.row_mut(i) {
                *v *= f;
            }
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Reinterprets the buffer as a tensor of the given shape.
    pub fn into_tensor(self, shape: Vec<usize>) -> Result<DenseTensor> {
        DenseTensor::new(shape, self.data)
    }
}

/// A dense row-major d-way tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&n| n == 0) {
            return Err(NttError::Dimension(format!(
                "tensor shape must be nonempty with positive extents, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NttError::Dimension(format!(
                "tensor shape {shape:?} expects {numel} entries, got {}",
                data.len()
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        DenseTensor::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.shape.len()
            || index.iter().zip(&self.shape).any(|(i, n)| i >= n)
        {
            return Err(NttError::Index(format!(
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[multi_to_flat(index, &self.shape)])
    }

    /// Reinterprets the tensor as a `rows x (numel / rows)` matrix. Because
    /// storage is row-major this is exactly the mode unfolding that groups
    /// the leading axes into rows and the trailing axes into columns.
    pub fn unfold(&self, rows: usize) -> Result<Matrix> {
        if rows == 0 || self.numel() % rows != 0 {
            return Err(NttError::Dimension(format!(
                "cannot unfold {} elements into {rows} rows",
                self.numel()
            )));
        }
        Matrix::new(rows, self.numel() / rows, self.data.clone())
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A tensor train: cores G(1)..G(d) with ranks (r_0, .., r_d), r_0 = r_d = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrain {
    cores: Vec<DenseTensor>,
    ranks: Vec<usize>,
}

impl TensorTrain {
    /// Validates core shapes: each core is order 3, adjacent ranks agree,
    /// and the boundary ranks are 1.
    pub fn new(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(NttError::Rank("tensor train needs at least one core".into()));
        }
        let mut ranks = Vec::with_capacity(cores.len() + 1);
        ranks.push(1usize);
        for (l, core) in cores.iter().enumerate() {
            let s = core.shape();
            if s.len() != 3 {
                return Err(NttError::Rank(format!(
                    "core {l} must be order 3, got shape {s:?}"
                )));
            }
            if s[0] != *ranks.last().unwrap() {
                return Err(NttError::Rank(format!(
                    "core {l} leading rank {} does not match previous trailing rank {}",
                    s[0],
                    ranks.last().unwrap()
                )));
            }
            ranks.push(s[2]);
        }
        if *ranks.last().unwrap() != 1 {
            return Err(NttError::Rank(format!(
                "last core trailing rank must be 1, got {}",
                ranks.last().unwrap()
            )));
        }
        Ok(TensorTrain { cores, ranks })
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    /// Mode sizes (n_1, .., n_d).
    pub fn shape(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape()[1]).collect()
    }

    /// Rank vector (r_0, .., r_d) of length d + 1.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn ndim(&self) -> usize {
        self.cores.len()
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.numel()).sum()
    }

    pub fn min_entry(&self) -> f64 {
        self.cores
            .iter()
            .map(|c| c.min_entry())
            .fold(f64::INFINITY, f64::min)
    }

    /// Evaluates one element by the chain product, multiplying core slices
    /// left to right. Cost is O(sum of r_{l-1} * r_l) per element.
    pub fn tt_element(&self, index: &[usize]) -> Result<f64> {
        let shape = self.shape();
        if index.len() != shape.len()
            || index.iter().zip(&shape).any(|(i, n)| i >= n)
        {
            return Err(NttError::Index(format!(
                "index {index:?} out of bounds for shape {shape:?}"
            )));
        }
        // First core has r_0 = 1, so its slice at i_1 is already a row vector.
        let first = &self.cores[0];
        let r1 = first.shape()[2];
        let mut v = first.as_slice()[index[0] * r1..(index[0] + 1) * r1].to_vec();
        for (l, core) in self.cores.iter().enumerate().skip(1) {
            let (n, r_out) = (core.shape()[1], core.shape()[2]);
            let mut next = vec![0.0; r_out];
            let data = core.as_slice();
            for (a, &va) in v.iter().enumerate() {
                if va == 0.0 {
                    continue;
                }
                let base = (a * n + index[l]) * r_out;
                let slice = &data[base..base + r_out];
                for (nx, &g) in next.iter_mut().zip(slice) {
                    *nx += va * g;
                }
            }
            v = next;
        }
        Ok(v[0])
    }

    /// Materializes the full tensor by matricized products left to right:
    /// the accumulator of shape (n_1..n_l, r_l) absorbs one core per step.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let shape = self.shape();
        let first = &self.cores[0];
        let mut acc = Matrix::new(
            first.shape()[1],
            first.shape()[2],
            first.as_slice().to_vec(),
        )?;
        for core in &self.cores[1..] {
            let (r_in, n, r_out) = (core.shape()[0], core.shape()[1], core.shape()[2]);
            let unfolded = core.unfold(r_in)?;
            let product = acc.matmul(&unfolded)?;
            let lead = product.rows() * n;
            acc = Matrix::new(lead, r_out, product.into_vec())?;
        }
        acc.into_tensor(shape)
    }
}
