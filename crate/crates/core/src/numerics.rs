//! Small dense linear algebra: symmetric eigendecomposition by cyclic Jacobi
//! rotations, determinants, symmetric square roots and quadratic forms.
//!
//! Everything here targets matrices of dimension up to a few dozen. Storage
//! is row-major and no attempt is made at blocking or vectorisation.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {diff:e} exceeds tolerance {tol:e}")]
    SymmetryViolation { row: usize, col: usize, diff: f64, tol: f64 },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length");
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "matvec dimension");
        (0..self.rows).map(|i| crate::scalar::dot(self.row(i), x)).collect()
    }

    /// `selfᵀ x`
    pub fn tr_matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows, x.len(), "transposed matvec dimension");
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            crate::scalar::axpy(xi, self.row(i), &mut out);
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, c: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * c).collect() }
    }

    pub fn trace(&self) -> T {
        self.diag().into_iter().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Spectral radius estimate for a general square matrix via Gelfand's
    /// formula, `ρ(M) = lim ‖M^k‖^{1/k}`, evaluated by repeated squaring.
    pub fn spectral_radius_estimate(&self) -> T {
        assert!(self.is_square());
        let mut m = self.clone();
        let mut log_scale = T::zero();
        let mut power = T::one();
        for _ in 0..40 {
            let nrm = m.frobenius_norm();
            if nrm == T::zero() {
                return T::zero();
            }
            // keep M^k / s_k with log(s_k) tracked to avoid overflow
            m = m.scale(nrm.recip());
            log_scale += nrm.ln();
            m = m.matmul(&m);
            log_scale = log_scale + log_scale;
            power = power + power;
        }
        let nrm = m.frobenius_norm();
        if nrm == T::zero() {
            return T::zero();
        }
        ((log_scale + nrm.ln()) / power).exp()
    }
}

impl<T: Real> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Relative tolerance used when validating symmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A square matrix validated to be finite and symmetric.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix<T>", into = "Matrix<T>", bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct SymMatrix<T: Real>(Matrix<T>);

impl<T: Real> SymMatrix<T> {
    /// Validates finiteness and symmetry, then stores the exact average of
    /// the two triangles so the stored matrix is exactly symmetric.
    pub fn new(m: Matrix<T>) -> Result<Self, NumericsError> {
        if !m.is_square() {
            return Err(NumericsError::NotSquare { rows: m.rows, cols: m.cols });
        }
        let n = m.rows;
        for i in 0..n {
            for j in 0..n {
                if !m[(i, j)].is_finite() {
                    return Err(NumericsError::NonFinite { row: i, col: j });
                }
            }
        }
        let scale = m.max_abs().max(T::min_positive_value());
        let tol = T::of(SYMMETRY_TOL).max(T::epsilon() * T::of(4.0)) * scale;
        let mut out = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (out[(i, j)] - out[(j, i)]).abs();
                if diff > tol {
                    return Err(NumericsError::SymmetryViolation {
                        row: i,
                        col: j,
                        diff: diff.as_f64(),
                        tol: tol.as_f64(),
                    });
                }
                let avg = (out[(i, j)] + out[(j, i)]) * T::of(0.5);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        Ok(Self(out))
    }

    /// Symmetrises `(m + mᵀ)/2` without validating closeness. Entries must be finite.
    pub fn symmetrize(m: &Matrix<T>) -> Result<Self, NumericsError> {
        let s = m.add(&m.transpose()).scale(T::of(0.5));
        Self::new(s)
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn from_diag(diag: &[T]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        Self::new(Matrix::from_rows(rows))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }

    pub fn scale(&self, c: T) -> Self {
        Self(self.0.scale(c))
    }

    pub fn trace(&self) -> T {
        self.0.trace()
    }
}

impl<T: Real> Index<(usize, usize)> for SymMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, idx: (usize, usize)) -> &T {
        &self.0[idx]
    }
}

impl<T: Real> fmt::Debug for SymMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sym{:?}", self.0)
    }
}

impl<T: Real> TryFrom<Matrix<T>> for SymMatrix<T> {
    type Error = NumericsError;
    fn try_from(m: Matrix<T>) -> Result<Self, Self::Error> {
        Self::new(m)
    }
}

impl<T: Real> From<SymMatrix<T>> for Matrix<T> {
    fn from(s: SymMatrix<T>) -> Self {
        s.0
    }
}

/// Eigenvalues sorted descending with matching orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition<T: Real> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Matrix<T>,
}

impl<T: Real> SpectralDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V f(Λ) Vᵀ`
    pub fn compose(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.dim();
        let v = &self.eigenvectors;
        let fl: Vec<T> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        Matrix::from_fn(n, n, |i, j| (0..n).fold(T::zero(), |acc, k| acc + v[(i, k)] * fl[k] * v[(j, k)]))
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        self.compose(|l| l)
    }

    pub fn eigenvector(&self, k: usize) -> Vec<T> {
        self.eigenvectors.column(k)
    }
}

const MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps visit `(p, q)` pairs in row order and stop once the off-diagonal
/// Frobenius norm drops below `1e-12` relative to the full norm (or a few
/// ulps for `f32`). Each eigenvector is signed so its first non-negligible
/// component is positive, and eigenvalues are stably sorted descending.
pub fn eigh_symmetric<T: Real>(m: &SymMatrix<T>) -> SpectralDecomposition<T> {
    let n = m.dim();
    let mut a = m.matrix().clone();
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm();
    let tol = T::of(1e-12).max(T::epsilon() * T::of(8.0)) * total;

    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off <= tol || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = (t * t + T::one()).sqrt().recip();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut vectors = Matrix::zeros(n, n);
    let sign_tol = T::epsilon().sqrt();
    for (col, &k) in order.iter().enumerate() {
        let first = (0..n).map(|i| v[(i, k)]).find(|x| x.abs() > sign_tol).unwrap_or(T::one());
        let sign = if first < T::zero() { -T::one() } else { T::one() };
        for i in 0..n {
            vectors[(i, col)] = v[(i, k)] * sign;
        }
    }
    SpectralDecomposition { eigenvalues: order.iter().map(|&k| eig[k]).collect(), eigenvectors: vectors }
}

fn off_diagonal_norm<T: Real>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

// Applies the rotation J(p, q) as A <- Jᵀ A J, V <- V J.
fn rotate<T: Real>(a: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize, c: T, s: T, t: T) {
    let n = a.rows();
    let apq = a[(p, q)];
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = T::zero();
    a[(q, p)] = T::zero();
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a[(r, p)];
        let arq = a[(r, q)];
        let new_rp = c * arp - s * arq;
        let new_rq = s * arp + c * arq;
        a[(r, p)] = new_rp;
        a[(p, r)] = new_rp;
        a[(r, q)] = new_rq;
        a[(q, r)] = new_rq;
    }
    for r in 0..n {
        let vrp = v[(r, p)];
        let vrq = v[(r, q)];
        v[(r, p)] = c * vrp - s * vrq;
        v[(r, q)] = s * vrp + c * vrq;
    }
}

/// Product of eigenvalues.
pub fn determinant<T: Real>(m: &SymMatrix<T>) -> T {
    eigh_symmetric(m).eigenvalues.iter().fold(T::one(), |acc, &l| acc * l)
}

/// Symmetric square root `V Λ^{1/2} Vᵀ` of a positive definite matrix.
pub fn sqrt_factor<T: Real>(m: &SymMatrix<T>) -> Result<Matrix<T>, NumericsError> {
    let dec = eigh_symmetric(m);
    if let Some(&bad) = dec.eigenvalues.iter().find(|&&l| l <= T::zero()) {
        return Err(NumericsError::NotPositiveDefinite { eigenvalue: bad.as_f64() });
    }
    Ok(dec.compose(|l| l.sqrt()))
}

/// `xᵀ M x`
pub fn mahalanobis_quadform<T: Real>(m: &SymMatrix<T>, x: &[T]) -> Result<T, NumericsError> {
    if x.len() != m.dim() {
        return Err(NumericsError::DimensionMismatch { expected: m.dim(), found: x.len() });
    }
    let mx = m.matrix().matvec(x);
    Ok(crate::scalar::dot(x, &mx))
}

/// Lower-triangular Cholesky factor. Fails if a pivot is not positive.
pub fn cholesky<T: Real>(m: &SymMatrix<T>) -> Result<Matrix<T>, NumericsError> {
    let n = m.dim();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= T::zero() || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { eigenvalue: d.as_f64() });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `M X = B` for symmetric positive definite `M`.
pub fn solve_spd<T: Real>(m: &SymMatrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if b.rows() != m.dim() {
        return Err(NumericsError::DimensionMismatch { expected: m.dim(), found: b.rows() });
    }
    let l = cholesky(m)?;
    let n = m.dim();
    let mut x = b.clone();
    for c in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel_frob(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.sub(b).frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    fn random_sym(n: usize, entries: &[f64]) -> SymMatrix<f64> {
        let m = Matrix::from_fn(n, n, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            entries[(a * n + b) % entries.len()]
        });
        SymMatrix::new(m).unwrap()
    }

    #[test]
    fn diagonal_input_is_already_decomposed() {
        let dec = eigh_symmetric(&SymMatrix::from_diag(&[2.0, -1.0]));
        assert_eq!(dec.eigenvalues, vec![2.0, -1.0]);
        assert_eq!(dec.eigenvectors, Matrix::identity(2));
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let dec = eigh_symmetric(&SymMatrix::<f64>::identity(3));
        assert_eq!(dec.eigenvalues, vec![1.0; 3]);
    }

    #[test]
    fn two_by_two_coupled() {
        let m = SymMatrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let dec = eigh_symmetric(&m);
        assert!((dec.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((dec.eigenvalues[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = dec.eigenvector(0);
        let v1 = dec.eigenvector(1);
        assert!((v0[0] - r).abs() < 1e-12 && (v0[1] - r).abs() < 1e-12);
        assert!((v1[0] - r).abs() < 1e-12 && (v1[1] + r).abs() < 1e-12);
        assert!(rel_frob(&dec.reconstruct(), m.matrix()) < 1e-14);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let err = SymMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]])).unwrap_err();
        assert!(matches!(err, NumericsError::SymmetryViolation { row: 0, col: 1, .. }));
        assert!(err.to_string().contains("not symmetric"));
    }

    #[test]
    fn rejects_non_finite_input() {
        let err = SymMatrix::new(Matrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]])).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn determinant_examples() {
        assert_eq!(determinant(&SymMatrix::<f64>::identity(4)), 1.0);
        assert_eq!(determinant(&SymMatrix::from_diag(&[2.0, 0.5])), 1.0);
        let m = SymMatrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((determinant(&m) - 3.0).abs() < 1e-13);
        assert!((determinant(&SymMatrix::<f64>::from_diag(&[2.0, -3.0])) + 6.0).abs() < 1e-15);
    }

    #[test]
    fn sqrt_factor_examples() {
        assert_eq!(sqrt_factor(&SymMatrix::<f64>::identity(3)).unwrap(), Matrix::identity(3));
        let l = sqrt_factor(&SymMatrix::from_diag(&[4.0, 0.25])).unwrap();
        assert_eq!(l.diag(), vec![2.0, 0.5]);
        let m = SymMatrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let l = sqrt_factor(&m).unwrap();
        assert!(rel_frob(&l.matmul(&l.transpose()), m.matrix()) < 1e-14);
    }

    #[test]
    fn sqrt_factor_rejects_indefinite() {
        let err = sqrt_factor(&SymMatrix::from_diag(&[1.0, -0.5])).unwrap_err();
        assert_eq!(err, NumericsError::NotPositiveDefinite { eigenvalue: -0.5 });
        assert!(sqrt_factor(&SymMatrix::from_diag(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn quadform_examples() {
        assert_eq!(mahalanobis_quadform(&SymMatrix::identity(2), &[3.0, 4.0]).unwrap(), 25.0);
        let m = SymMatrix::from_rows(&[vec![3.0, -1.0], vec![-1.0, 5.0]]).unwrap();
        assert_eq!(mahalanobis_quadform(&m, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mahalanobis_quadform(&SymMatrix::from_diag(&[2.0, 0.5]), &[1.0, 2.0]).unwrap(), 4.0);
        assert_eq!(
            mahalanobis_quadform(&SymMatrix::<f64>::identity(2), &[1.0]).unwrap_err(),
            NumericsError::DimensionMismatch { expected: 2, found: 1 }
        );
    }

    #[test]
    fn solve_spd_recovers_rhs() {
        let m = SymMatrix::from_rows(&[vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 0.5], vec![0.0, 0.5, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, -1.0]]);
        let x = solve_spd(&m, &b).unwrap();
        assert!(rel_frob(&m.matrix().matmul(&x), &b) < 1e-14);
    }

    #[test]
    fn spectral_radius_of_triangular_matrix() {
        let m = Matrix::<f64>::from_rows(&[vec![0.5, 10.0], vec![0.0, -0.8]]);
        assert!((m.spectral_radius_estimate() - 0.8).abs() < 1e-6);
        assert_eq!(Matrix::<f64>::zeros(2, 2).spectral_radius_estimate(), 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let m = SymMatrix::from_rows(&[vec![2.0f32, 1.0], vec![1.0, 2.0]]).unwrap();
        let dec = eigh_symmetric(&m);
        assert!((dec.eigenvalues[0] - 3.0).abs() < 1e-5);
        assert!((determinant(&m) - 3.0).abs() < 1e-5);
    }

    #[test]
    fn ties_are_sign_normalised() {
        let dec = eigh_symmetric(&SymMatrix::from_diag(&[1.0, 1.0, 1.0]));
        for k in 0..3 {
            let v: Vec<f64> = dec.eigenvector(k);
            let first = v.iter().find(|x: &&f64| x.abs() > 1e-8).unwrap();
            assert!(*first > 0.0);
        }
    }

    proptest! {
        #[test]
        fn eigh_reconstructs_random_symmetric(
            n in 1usize..=20,
            entries in proptest::collection::vec(-5.0f64..5.0, 400),
        ) {
            let m = random_sym(n, &entries);
            let dec = eigh_symmetric(&m);
            prop_assert!(rel_frob(&dec.reconstruct(), m.matrix()) < 1e-8 || m.matrix().frobenius_norm() == 0.0);
            let vtv = dec.eigenvectors.transpose().matmul(&dec.eigenvectors);
            prop_assert!(vtv.sub(&Matrix::identity(n)).max_abs() < 1e-10);
            for w in dec.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let prod: f64 = dec.eigenvalues.iter().product();
            let det = determinant(&m);
            prop_assert!((det - prod).abs() <= 1e-8 * prod.abs().max(1e-300));
        }

        #[test]
        fn sqrt_factor_of_random_spd(
            n in 1usize..=12,
            entries in proptest::collection::vec(-5.0f64..5.0, 144),
        ) {
            let b = Matrix::from_fn(n, n, |i, j| entries[i * n + j]);
            let spd = SymMatrix::symmetrize(&b.matmul(&b.transpose()).add(&Matrix::identity(n).scale(0.1))).unwrap();
            let l = sqrt_factor(&spd).unwrap();
            prop_assert!(rel_frob(&l.matmul(&l.transpose()), spd.matrix()) < 1e-8);
        }
    }
}
