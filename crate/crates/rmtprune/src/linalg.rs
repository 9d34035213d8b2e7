//! Dense row-major matrices and the faer glue used for products and
//! decompositions.
//!
//! faer is built without its rayon feature, so every kernel runs on one
//! thread with a fixed reduction order and results are bit-reproducible.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Thin SVD `W = U diag(s) Vᵀ` with `s` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: RealMatrix,
    pub s: Vec<f64>,
    pub v: RealMatrix,
}

impl RealMatrix {
    /// Validating constructor: rejects length mismatches and non-finite
    /// entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry {} at ({}, {})",
                data[i],
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// i.i.d. N(0, std²) entries drawn row by row.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Self { rows, cols, data: rng::normals(rng, rows * cols, std) }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[i * self.cols + j] = x;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> RealMatrix {
        Self::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> RealMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(idx.len(), self.cols, data)
    }

    pub fn view(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> MatMut<'_, f64> {
        MatMut::from_row_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    pub fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub fn from_faer(m: MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn transpose(&self) -> RealMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {:?} by {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = RealMatrix::zeros(self.rows, rhs.cols);
        gemm(&mut out, self.view(), rhs.view(), 1.0, false);
        Ok(out)
    }

    /// `self · v` for a vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealMatrix {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, a: f64) -> RealMatrix {
        self.map(|x| a * x)
    }

    pub fn add(&self, rhs: &RealMatrix) -> Result<RealMatrix> {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &RealMatrix) -> Result<RealMatrix> {
        self.zip(rhs, |a, b| a - b)
    }

    /// `self += a · rhs`.
    pub fn axpy(&mut self, a: f64, rhs: &RealMatrix) -> Result<()> {
        self.check_same_shape(rhs)?;
        for (x, y) in self.data.iter_mut().zip(&rhs.data) {
            *x += a * y;
        }
        Ok(())
    }

    fn zip(&self, rhs: &RealMatrix, f: impl Fn(f64, f64) -> f64) -> Result<RealMatrix> {
        self.check_same_shape(rhs)?;
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    fn check_same_shape(&self, rhs: &RealMatrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension(format!(
                "shapes {:?} and {:?} differ",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// Entrywise ℓ1 norm Σ|wᵢⱼ|.
    pub fn l1_entrywise(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    /// Induced 1-norm: largest column absolute sum.
    pub fn max_col_abs_sum(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, x) in sums.iter_mut().zip(self.row(i)) {
                *s += x.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Induced ∞-norm: largest row absolute sum.
    pub fn max_row_abs_sum(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    /// Frobenius inner product ⟨A, B⟩.
    pub fn inner(&self, rhs: &RealMatrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(dot(&self.data, &rhs.data))
    }

    /// Singular values, descending, length min(rows, cols).
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        self.view()
            .singular_values()
            .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        Ok(self.singular_values()?.first().copied().unwrap_or(0.0))
    }

    pub fn thin_svd(&self) -> Result<Svd> {
        let svd = self
            .view()
            .thin_svd()
            .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))?;
        let s = svd.S().column_vector().iter().copied().collect();
        Ok(Svd { u: Self::from_faer(svd.U()), s, v: Self::from_faer(svd.V()) })
    }
}

impl Svd {
    /// `U diag(s) Vᵀ` using the current (possibly edited) factors.
    pub fn recompose(&self) -> RealMatrix {
        let k = self.s.len();
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (x, s) in us.row_mut(i)[..k].iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        let mut out = RealMatrix::zeros(self.u.rows, self.v.rows);
        gemm(&mut out, us.view(), self.v.view().transpose(), 1.0, false);
        out
    }
}

/// `dst = alpha · a · b` or, with `accumulate`, `dst += alpha · a · b`.
pub fn gemm(dst: &mut RealMatrix, a: MatRef<'_, f64>, b: MatRef<'_, f64>, alpha: f64, accumulate: bool) {
    let accum = if accumulate { Accum::Add } else { Accum::Replace };
    matmul(dst.view_mut(), accum, a, b, alpha, Par::Seq);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis of the column space of a full-column-rank matrix
/// (thin QR through faer).
pub fn orthonormal_columns(m: &RealMatrix) -> RealMatrix {
    let qr = m.view().qr();
    let q = qr.compute_thin_Q();
    RealMatrix::from_faer(q.as_ref())
}
