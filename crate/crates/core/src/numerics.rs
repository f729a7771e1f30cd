//! Dense linear algebra used by the variational solver.
//!
//! Everything here is small-matrix, row-major and allocation-per-call. The
//! solver only ever factorizes `M x M` matrices (M = number of inducing
//! points), so no attempt is made at blocking or BLAS dispatch. Inverses are
//! never formed explicitly; all solves go through a Cholesky factor.

use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Tolerance used when checking symmetry of matrices handed to [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Default diagonal jitter for kernel matrices.
pub const DEFAULT_JITTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("DenseMatrix::from_vec", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("DenseMatrix::from_vec".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("DenseMatrix::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn column(v: &[f64]) -> Self {
        DenseMatrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", self.rows, other.rows));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", self.cols, other.cols));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::shape("t_matvec", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &DenseMatrix,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Elementwise max |self - other|; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.sub(other).map_or(f64::INFINITY, |d| d.max_abs())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    /// Max |m_ij - m_ji|. Zero for symmetric matrices.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(m + m^T) / 2`.
    pub fn symmetrize(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Square lower-triangular matrix. Entries above the diagonal are structurally zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        LowerTriangular { dim: n, data }
    }

    /// Takes the lower triangle of a square matrix; fails if anything above the
    /// diagonal is nonzero.
    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape("LowerTriangular::from_dense", "square", format!("{}x{}", m.rows(), m.cols())));
        }
        let n = m.rows();
        for i in 0..n {
            for j in (i + 1)..n {
                if m[(i, j)] != 0.0 {
                    return Err(Error::shape("LowerTriangular::from_dense", "zero upper triangle", format!("entry ({i},{j}) = {}", m[(i, j)])));
                }
            }
        }
        Ok(LowerTriangular {
            dim: n,
            data: m.as_slice().to_vec(),
        })
    }

    /// Lower triangle of `m`, discarding whatever is above the diagonal.
    pub fn lower_part(m: &DenseMatrix) -> Self {
        let n = m.rows().min(m.cols());
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = m[(i, j)];
            }
        }
        LowerTriangular { dim: n, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[i * self.dim + j]
        }
    }

    /// Sets a lower-triangle entry. Panics if `j > i`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(j <= i, "cannot set ({i},{j}) above the diagonal");
        self.data[i * self.dim + j] = v;
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| self.get(i, j) == 0.0))
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// `L * L^T`.
    pub fn outer(&self) -> DenseMatrix {
        let n = self.dim;
        DenseMatrix::from_fn(n, n, |i, j| (0..=i.min(j)).map(|k| self.get(i, k) * self.get(j, k)).sum())
    }

    /// Sum of log diagonal entries, i.e. `log |L|` for a positive diagonal.
    pub fn log_det(&self) -> f64 {
        self.diag().iter().map(|d| d.ln()).sum()
    }

    /// Solves `L x = b` by forward substitution.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::shape("LowerTriangular::solve", self.dim, b.len()));
        }
        let mut x = b.to_vec();
        for i in 0..self.dim {
            let mut s = x[i];
            for k in 0..i {
                s -= self.get(i, k) * x[k];
            }
            let d = self.get(i, i);
            if d == 0.0 {
                return Err(Error::SingularFactor { index: i });
            }
            x[i] = s / d;
        }
        Ok(x)
    }

    /// Solves `L^T x = b` by back substitution.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::shape("LowerTriangular::solve_transpose", self.dim, b.len()));
        }
        let mut x = b.to_vec();
        for i in (0..self.dim).rev() {
            let mut s = x[i];
            for k in (i + 1)..self.dim {
                s -= self.get(k, i) * x[k];
            }
            let d = self.get(i, i);
            if d == 0.0 {
                return Err(Error::SingularFactor { index: i });
            }
            x[i] = s / d;
        }
        Ok(x)
    }

    /// Solves `(L L^T) x = b` given that `self` is a Cholesky factor.
    pub fn cho_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_transpose(&self.solve(b)?)
    }

    /// Column-wise [`Self::cho_solve`] for a matrix right-hand side.
    pub fn cho_solve_matrix(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if rhs.rows() != self.dim {
            return Err(Error::shape("cho_solve_matrix", self.dim, rhs.rows()));
        }
        let mut out = DenseMatrix::zeros(rhs.rows(), rhs.cols());
        for j in 0..rhs.cols() {
            let x = self.cho_solve(&rhs.col(j))?;
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

/// Cholesky factorization `m = L L^T` of a symmetric positive definite matrix.
///
/// The input is symmetrized as `(m + m^T)/2` first; asymmetry beyond
/// [`SYMMETRY_TOL`] (relative to the largest entry, floored at 1) is rejected.
pub fn cholesky(m: &DenseMatrix) -> Result<LowerTriangular> {
    if !m.is_square() {
        return Err(Error::shape("cholesky", "square", format!("{}x{}", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteValue("cholesky input".into()));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = m.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = 0.5 * (m[(i, j)] + m[(j, i)]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(LowerTriangular { dim: n, data: l })
}

/// Solves `L C = U` for lower-triangular `L`, given lower-triangular `U` and `C`.
///
/// Row `i` is filled from the diagonal outwards:
/// `L[i][i-k] = (U[i][i-k] - sum_{j<k} L[i][i-j] C[i-j][i-k]) / C[i-k][i-k]`.
pub fn solve_lq(u_factor: &LowerTriangular, c_factor: &LowerTriangular) -> Result<LowerTriangular> {
    let n = u_factor.dim();
    if c_factor.dim() != n {
        return Err(Error::shape("solve_lq", n, c_factor.dim()));
    }
    if let Some(index) = (0..n).find(|&i| c_factor.get(i, i) == 0.0) {
        return Err(Error::SingularFactor { index });
    }
    let mut l = LowerTriangular::from_diag(&vec![0.0; n]);
    for i in 0..n {
        for k in 0..=i {
            let col = i - k;
            let mut s = u_factor.get(i, col);
            for j in 0..k {
                s -= l.get(i, i - j) * c_factor.get(i - j, col);
            }
            l.set(i, col, s / c_factor.get(col, col));
        }
    }
    Ok(l)
}

/// Solves `m x = rhs` for symmetric positive definite `m` via Cholesky.
pub fn solve_psd(m: &DenseMatrix, rhs: &DenseMatrix) -> Result<DenseMatrix> {
    if rhs.rows() != m.rows() {
        return Err(Error::shape("solve_psd", m.rows(), rhs.rows()));
    }
    cholesky(m)?.cho_solve_matrix(rhs)
}

/// `m + eps * I`.
pub fn add_jitter(m: &DenseMatrix, eps: f64) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..m.rows().min(m.cols()) {
        out[(i, i)] += eps;
    }
    out
}
