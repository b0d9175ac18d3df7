//! Dense linear-algebra primitives shared by every other module.
//!
//! Matrices are stored row-major. Symmetric eigendecompositions and SVDs are
//! delegated to `nalgebra`; the Cholesky factorization is hand-written so a
//! breakdown can report the failing pivot.

use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

/// Convergence threshold on off-diagonal mass for the iterative eigen/SVD solvers.
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// Relative tolerance (against the largest entry) for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: |a({row},{col}) - a({col},{row})| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix is not positive definite: Cholesky breakdown at pivot {pivot} (value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not positive definite: smallest eigenvalue is {min_eigenvalue:e}")]
    Indefinite { min_eigenvalue: f64 },

    #[error("{routine} did not converge")]
    NoConvergence { routine: &'static str },

    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid matrix shape {rows}x{cols} for {len} entries")]
    BadShape { rows: usize, cols: usize, len: usize },
}

/// Dense real matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix. Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged or empty input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_row_major(rows.len(), cols, data).expect("non-empty rows")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Symmetric matrix built from the lower triangle: `f(i, j)` is called once
    /// for every `j <= i` and mirrored.
    pub fn symmetric_from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * x`, accumulating each row in ascending column order.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "vector length mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * x`.
    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "vector length mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        Self::from_nalgebra(&(self.to_nalgebra() * other.to_nalgebra()))
    }

    /// Sub-matrix formed by the given rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (oi, &i) in rows.iter().enumerate() {
            let src = self.row(i);
            let dst = &mut out.data[oi * cols.len()..(oi + 1) * cols.len()];
            for (d, &j) in dst.iter_mut().zip(cols) {
                *d = src[j];
            }
        }
        out
    }

    pub fn add_to_diagonal(&mut self, shift: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += shift;
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest |a(i,j) - a(j,i)| with its location, for square matrices.
    pub fn symmetry_defect(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in 0..i {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > worst.2 {
                    worst = (i, j, gap);
                }
            }
        }
        worst
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(LinalgError::NonFinite {
                row: k / self.cols,
                col: k % self.cols,
            }),
            None => Ok(()),
        }
    }

    fn check_symmetric(&self) -> Result<(), LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        self.check_finite()?;
        let (row, col, gap) = self.symmetry_defect();
        if gap > SYMMETRY_TOL * self.max_abs() {
            return Err(LinalgError::NotSymmetric { row, col, gap });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Inner product accumulated in ascending index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Four-lane inner product used by the O(n³) kernels. The lane split is
/// fixed, so results are still bit-reproducible.
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Eigenvalues sorted non-increasing with matching orthonormal eigenvectors
/// stored as the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        *self.values.last().expect("non-empty spectrum")
    }

    /// `E diag(values) Eᵀ`, symmetric by construction.
    pub fn reconstruct_with(&self, values: &[f64]) -> DenseMatrix {
        let n = self.values.len();
        let scaled = DenseMatrix::from_fn(n, n, |i, k| self.vectors[(i, k)] * values[k]);
        let full = scaled.matmul(&self.vectors.transpose());
        DenseMatrix::symmetric_from_fn(n, |i, j| full[(i, j)])
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(&self.values)
    }
}

/// Flips `v` so its largest-magnitude entry is positive. Returns whether it flipped.
fn normalize_sign(v: &mut [f64]) -> bool {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

fn iteration_budget(n: usize) -> usize {
    1000 + 200 * n
}

/// Full symmetric eigendecomposition, eigenvalues sorted descending.
pub fn sym_eig(m: &DenseMatrix) -> Result<EigenDecomposition, LinalgError> {
    m.check_symmetric()?;
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m.to_nalgebra(), CONVERGENCE_TOL, iteration_budget(n))
        .ok_or(LinalgError::NoConvergence {
            routine: "symmetric eigendecomposition",
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        normalize_sign(&mut v);
        for (i, x) in v.into_iter().enumerate() {
            vectors[(i, col)] = x;
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Eigenvalues only, sorted descending. Cheaper than [`sym_eig`] for large matrices.
pub fn sym_eigenvalues(m: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    m.check_symmetric()?;
    let mut values: Vec<f64> = m.to_nalgebra().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// `λ_max / λ_min` of a symmetric positive-definite matrix.
pub fn condition_number(m: &DenseMatrix) -> Result<f64, LinalgError> {
    let values = sym_eigenvalues(m)?;
    let (max, min) = (values[0], *values.last().expect("non-empty"));
    if min <= 0.0 {
        return Err(LinalgError::Indefinite { min_eigenvalue: min });
    }
    Ok(max / min)
}

/// Leading singular triplets. `left` is rows×p, `right` is cols×p, both with
/// orthonormal columns; `values` is non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSvd {
    pub left: DenseMatrix,
    pub values: Vec<f64>,
    pub right: DenseMatrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// Keeps the leading `p` triplets.
    pub fn truncate(&self, p: usize) -> Result<TruncatedSvd, LinalgError> {
        if p == 0 || p > self.rank() {
            return Err(LinalgError::RankOutOfRange {
                rank: p,
                max: self.rank(),
            });
        }
        let keep = |m: &DenseMatrix| DenseMatrix::from_fn(m.nrows(), p, |i, k| m[(i, k)]);
        Ok(TruncatedSvd {
            left: keep(&self.left),
            values: self.values[..p].to_vec(),
            right: keep(&self.right),
        })
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let (rows, cols) = (self.left.nrows(), self.right.nrows());
        DenseMatrix::from_fn(rows, cols, |i, j| {
            (0..self.rank()).fold(0.0, |acc, k| {
                acc + self.left[(i, k)] * self.values[k] * self.right[(j, k)]
            })
        })
    }
}

/// Thin SVD of rank `min(rows, cols)`. Each right singular vector is signed so
/// its largest-magnitude entry is positive; the paired left vector follows.
pub fn thin_svd(m: &DenseMatrix) -> Result<TruncatedSvd, LinalgError> {
    m.check_finite()?;
    let (rows, cols) = (m.nrows(), m.ncols());
    let svd = SVD::try_new(
        m.to_nalgebra(),
        true,
        true,
        CONVERGENCE_TOL,
        iteration_budget(rows.max(cols)),
    )
    .ok_or(LinalgError::NoConvergence { routine: "SVD" })?;
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let rank = rows.min(cols);
    let mut left = DenseMatrix::zeros(rows, rank);
    let mut right = DenseMatrix::zeros(cols, rank);
    for k in 0..rank {
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        let flip = if normalize_sign(&mut v) { -1.0 } else { 1.0 };
        for (j, x) in v.into_iter().enumerate() {
            right[(j, k)] = x;
        }
        for i in 0..rows {
            left[(i, k)] = flip * u[(i, k)];
        }
    }
    Ok(TruncatedSvd {
        left,
        values: svd.singular_values.iter().copied().collect(),
        right,
    })
}

/// Leading `p` singular triplets, computed from the full thin SVD.
pub fn truncated_svd(m: &DenseMatrix, p: usize) -> Result<TruncatedSvd, LinalgError> {
    let max = m.nrows().min(m.ncols());
    if p == 0 || p > max {
        return Err(LinalgError::RankOutOfRange { rank: p, max });
    }
    thin_svd(m)?.truncate(p)
}

/// Singular values only, sorted descending.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    m.check_finite()?;
    let n = m.nrows().max(m.ncols());
    let svd = SVD::try_new(m.to_nalgebra(), false, false, CONVERGENCE_TOL, iteration_budget(n))
        .ok_or(LinalgError::NoConvergence { routine: "SVD" })?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Lower-triangular factor `L` with `M = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    pub fn factor(m: &DenseMatrix) -> Result<Self, LinalgError> {
        m.check_symmetric()?;
        let n = m.nrows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            let (done, rest) = l.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for j in 0..=i {
                let s = if j < i {
                    let row_j = &done[j * n..j * n + j];
                    m[(i, j)] - dot_unrolled(&row_i[..j], row_j)
                } else {
                    m[(i, i)] - dot_unrolled(&row_i[..i], &row_i[..i])
                };
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { pivot: i, value: s });
                    }
                    row_i[i] = s.sqrt();
                } else {
                    row_i[j] = s / done[j * n + j];
                }
            }
        }
        Ok(Self {
            lower: DenseMatrix::from_row_major(n, n, l)?,
        })
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// `L z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        (0..self.lower.nrows())
            .map(|i| dot(&self.lower.row(i)[..=i], &z[..=i]))
            .collect()
    }

    /// `M⁻¹ = L⁻ᵀ L⁻¹`, symmetric by construction.
    pub fn inverse(&self) -> DenseMatrix {
        let n = self.lower.nrows();
        let l = &self.lower;
        // Row j of `inv_cols` is column j of L⁻¹ (zero above the diagonal).
        let inv_cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut x = vec![0.0; n];
                for i in j..n {
                    let rhs = if i == j { 1.0 } else { 0.0 };
                    let s = dot_unrolled(&l.row(i)[j..i], &x[j..i]);
                    x[i] = (rhs - s) / l[(i, i)];
                }
                x
            })
            .collect();
        let lower_rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..=i)
                    .map(|j| dot_unrolled(&inv_cols[i][i..], &inv_cols[j][i..]))
                    .collect()
            })
            .collect();
        DenseMatrix::symmetric_from_fn(n, |i, j| lower_rows[i][j])
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_invert(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    Ok(Cholesky::factor(m)?.inverse())
}

/// `n` draws of `L z` with `z` standard normal and `M = L Lᵀ`. Each vector
/// consumes `m` consecutive normals from `rng`.
pub fn chol_sample<R: Rng + ?Sized>(
    m: &DenseMatrix,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Vec<f64>>, LinalgError> {
    let chol = Cholesky::factor(m)?;
    Ok((0..n).map(|_| sample_with(&chol, rng)).collect())
}

/// One draw of `L z` from a precomputed factor.
pub fn sample_with<R: Rng + ?Sized>(chol: &Cholesky, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..chol.lower.nrows())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    chol.mul_lower(&z)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! One-sided Jacobi SVD, independent of `nalgebra`, used as a test oracle.
    use super::DenseMatrix;

    /// Singular values of `m`, sorted descending.
    pub fn jacobi_singular_values(m: &DenseMatrix) -> Vec<f64> {
        let (rows, cols) = (m.nrows(), m.ncols());
        let m = if rows < cols { m.transpose() } else { m.clone() };
        let (rows, cols) = (m.nrows(), m.ncols());
        let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
        for _sweep in 0..100 {
            let mut rotated = false;
            for p in 0..cols {
                for q in p + 1..cols {
                    let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                    let beta: f64 = a[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let (x, y) = (a[p][i], a[q][i]);
                        a[p][i] = c * x - s * y;
                        a[q][i] = s * x + c * y;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut s: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s
    }
}
