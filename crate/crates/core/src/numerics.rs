//! Dense complex matrices and the handful of kernels the solvers need.
//!
//! Entries are `Complex64` (a real/imaginary pair of `f64`). Matrices are
//! stored row-major. Gradients of real-valued losses with respect to complex
//! quantities use the convention `G = dL/dRe + i dL/dIm` throughout the crate,
//! so for `y = M x` the backward rules are `G_x = M^H G_y` and `G_M = G_y x^H`.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Relative pivot / diagonal guard used by `diag_reciprocal` and the LU solver.
pub const TOL_DIAG_REL: f64 = 1e-12;

/// Default central-difference step for [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:+.4e}{:+.4e}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMatrix { rows, cols, data }
    }

    /// Builds a matrix from row-major data.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(CMatrix { rows, cols, data })
    }

    /// Builds a matrix whose `k`-th column is `cols[k]`.
    pub fn from_columns(rows: usize, columns: &[Vec<C64>]) -> Self {
        Self::from_fn(rows, columns.len(), |r, c| columns[c][r])
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[C64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, &z) in v.iter().enumerate() {
            self[(r, c)] = z;
        }
    }

    pub fn diag(&self) -> Vec<C64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn conj(&self) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn scale(&self, s: C64) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * s).collect() }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * s).collect() }
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^H * rhs` without materialising the adjoint.
    pub fn adjoint_mul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "adjoint_mul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            for r in 0..self.cols {
                let a = self.data[k * self.cols + r].conj();
                if a == ZERO {
                    continue;
                }
                for c in 0..rhs.cols {
                    out.data[r * rhs.cols + c] += a * rhs.data[k * rhs.cols + c];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if self.cols != v.len() {
            return Err(Error::ShapeMismatch(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// `self^H v`.
    pub fn adjoint_mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if self.rows != v.len() {
            return Err(Error::ShapeMismatch(format!(
                "adjoint matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![ZERO; self.cols];
        for (r, &x) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a.conj() * x;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sqr().sqrt()
    }

    pub fn trace(&self) -> C64 {
        self.diag().into_iter().sum()
    }

    /// Real inner product `Re <self, other>` with `<A, B> = sum conj(a) b`.
    pub fn real_inner(&self, other: &CMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn row_norm_sqr(&self, r: usize) -> f64 {
        self.row(r).iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn col_norm_sqr(&self, c: usize) -> f64 {
        (0..self.rows).map(|r| self[(r, c)].norm_sqr()).sum()
    }

    /// Rows `idx[0], idx[1], ...` stacked in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> CMatrix {
        Self::from_fn(idx.len(), self.cols, |r, c| self[(idx[r], c)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Solves `self * X = rhs` by LU with partial pivoting.
    pub fn solve(&self, rhs: &CMatrix) -> Result<CMatrix> {
        Lu::factor(self)?.solve(rhs)
    }

    pub fn inverse(&self) -> Result<CMatrix> {
        self.solve(&CMatrix::identity(self.rows))
    }

    /// Natural log of the determinant's modulus and the determinant's phase factor.
    pub fn log_det(&self) -> Result<(f64, C64)> {
        let lu = Lu::factor(self)?;
        let mut log_abs = 0.0;
        let mut phase = if lu.swaps % 2 == 0 { ONE } else { -ONE };
        for i in 0..self.rows {
            let d = lu.lu[(i, i)];
            log_abs += d.norm().ln();
            phase *= d / d.norm();
        }
        Ok((log_abs, phase))
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Add<&CMatrix> for &CMatrix {
    type Output = CMatrix;
    fn add(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape(), "matrix add shape mismatch");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub<&CMatrix> for &CMatrix {
    type Output = CMatrix;
    fn sub(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape(), "matrix sub shape mismatch");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl AddAssign<&CMatrix> for CMatrix {
    fn add_assign(&mut self, rhs: &CMatrix) {
        assert_eq!(self.shape(), rhs.shape(), "matrix add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl Mul<&CMatrix> for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

/// `a^H b` for column vectors.
pub fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Pivots below `n * LU_PIVOT_REL * max|a_ij|` are treated as exact zeros.
pub const LU_PIVOT_REL: f64 = f64::EPSILON;

/// LU factorisation with partial pivoting.
pub struct Lu {
    lu: CMatrix,
    perm: Vec<usize>,
    swaps: usize,
}

impl Lu {
    pub fn factor(a: &CMatrix) -> Result<Lu> {
        if !a.is_square() {
            return Err(Error::ShapeMismatch(format!("LU of {}x{} matrix", a.rows, a.cols)));
        }
        let n = a.rows;
        let scale = a.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|r| (r, lu[(r, k)].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmax > LU_PIVOT_REL * n as f64 * scale) || scale == 0.0 {
                return Err(Error::Singular(format!("pivot {pmax:e} at column {k}")));
            }
            if p != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                swaps += 1;
            }
            let piv = lu[(k, k)];
            for r in k + 1..n {
                let f = lu[(r, k)] / piv;
                lu[(r, k)] = f;
                if f == ZERO {
                    continue;
                }
                for c in k + 1..n {
                    let t = lu[(k, c)];
                    lu[(r, c)] -= f * t;
                }
            }
        }
        Ok(Lu { lu, perm, swaps })
    }

    pub fn solve(&self, rhs: &CMatrix) -> Result<CMatrix> {
        let n = self.lu.rows;
        if rhs.rows != n {
            return Err(Error::ShapeMismatch(format!("solve with {n}x{n} and {} rows", rhs.rows)));
        }
        let mut x = rhs.select_rows(&self.perm);
        for c in 0..rhs.cols {
            for r in 0..n {
                let mut s = x[(r, c)];
                for k in 0..r {
                    s -= self.lu[(r, k)] * x[(k, c)];
                }
                x[(r, c)] = s;
            }
            for r in (0..n).rev() {
                let mut s = x[(r, c)];
                for k in r + 1..n {
                    s -= self.lu[(r, k)] * x[(k, c)];
                }
                x[(r, c)] = s / self.lu[(r, r)];
            }
        }
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[C64]) -> Result<Vec<C64>> {
        let rhs = CMatrix::from_columns(b.len(), &[b.to_vec()]);
        Ok(self.solve(&rhs)?.col(0))
    }
}

/// Diagonal-reciprocal surrogate for inversion: `1/a_ii` on the diagonal, zero
/// elsewhere. Equals the exact inverse when `a` is diagonal.
pub fn diag_reciprocal(a: &CMatrix) -> Result<CMatrix> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "diag_reciprocal of {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let diag = a.diag();
    let max = diag.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tol = TOL_DIAG_REL * max;
    let mut out = CMatrix::zeros(a.rows(), a.cols());
    for (i, d) in diag.into_iter().enumerate() {
        if !(d.norm() > tol) || max == 0.0 {
            return Err(Error::DegenerateDiagonal { index: i, magnitude: d.norm() });
        }
        out[(i, i)] = d.inv();
    }
    Ok(out)
}

/// Hermitian eigendecomposition `a = V diag(d) V^H`, eigenvalues ascending.
pub fn hermitian_eigen(a: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!("eigen of {}x{} matrix", a.rows(), a.cols())));
    }
    let n = a.rows();
    let m = nalgebra::DMatrix::from_fn(n, n, |r, c| (a[(r, c)] + a[(c, r)].conj()) * 0.5);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param_count: usize,
    pub per_param_errors: Vec<f64>,
}

/// Central-difference stencil used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h^4)`.
    /// Allows a larger step, so round-off stays small on tiny gradient entries.
    FourPoint,
}

/// Compares an analytic gradient to central finite differences, parameter by
/// parameter. The relative error is `|a - n| / max(|a|, |n|, 1e-6)`, so
/// gradient entries far below unit scale are judged on an absolute basis.
pub fn grad_check<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_with(f, analytic, point, step, Stencil::TwoPoint)
}

pub fn grad_check_with<F>(mut f: F, analytic: &[f64], point: &[f64], step: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut per_param_errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        let mut at = |d: f64| {
            x[i] = orig + d;
            let v = f(&x);
            x[i] = orig;
            v
        };
        let numeric = match stencil {
            Stencil::TwoPoint => (at(step) - at(-step)) / (2.0 * step),
            Stencil::FourPoint => (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step),
        };
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient entry {i}: analytic {a}, numeric {numeric}")));
        }
        per_param_errors.push((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    let max_rel_error = per_param_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, param_count: point.len(), per_param_errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, cc: usize) -> CMatrix {
        CMatrix::from_fn(r, cc, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn diag_reciprocal_of_3x3() {
        let a = CMatrix::from_fn(3, 3, |r, cc| c((r * 3 + cc + 1) as f64, 0.5));
        let d = diag_reciprocal(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((d[(i, i)] - a[(i, i)].inv()).norm() < 1e-15);
                } else {
                    assert_eq!(d[(i, j)], ZERO);
                }
            }
        }
    }

    #[test]
    fn diag_reciprocal_is_inverse_on_diagonals() {
        let a = CMatrix::from_diag(&[c(2.0, 0.0), c(4.0, 0.0)]);
        let d = diag_reciprocal(&a).unwrap();
        assert_eq!(d[(0, 0)], c(0.5, 0.0));
        assert_eq!(d[(1, 1)], c(0.25, 0.0));
        assert!((&d * &a).max_abs_diff(&CMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn diag_reciprocal_error_bound_on_dominant_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let e = random_matrix(&mut rng, 4, 4);
            let mut a = (&e + &e.adjoint()).scale_real(0.1);
            for i in 0..4 {
                a[(i, i)] = c(3.0 + rng.random_range(0.0..2.0), 0.0);
            }
            let d = diag_reciprocal(&a).unwrap();
            let mut off = a.clone();
            for i in 0..4 {
                off[(i, i)] = ZERO;
            }
            // D*A - I = D*offdiag(A) exactly
            let resid = (&(&d * &a) - &CMatrix::identity(4)).frobenius_norm();
            assert!(resid <= off.frobenius_norm() * d.frobenius_norm() + 1e-12);
        }
    }

    #[test]
    fn diag_reciprocal_rejects_zero_diagonal() {
        let a = CMatrix::from_diag(&[c(1.0, 0.0), ZERO]);
        assert!(matches!(diag_reciprocal(&a), Err(Error::DegenerateDiagonal { index: 1, .. })));
        assert!(diag_reciprocal(&CMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn diag_reciprocal_involution_on_diagonals() {
        let d = CMatrix::from_diag(&[c(2.0, 1.0), c(-0.5, 3.0), c(1e-3, 0.0)]);
        let back = diag_reciprocal(&diag_reciprocal(&d).unwrap()).unwrap();
        assert!(back.max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn lu_solve_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 5, 5);
        let inv = a.inverse().unwrap();
        assert!((&a * &inv).max_abs_diff(&CMatrix::identity(5)) < 1e-12);
        let b = random_matrix(&mut rng, 5, 2);
        let x = a.solve(&b).unwrap();
        assert!((&a * &x).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn lu_reports_singular() {
        let a = CMatrix::from_fn(2, 2, |_, _| ONE);
        assert!(matches!(a.solve(&CMatrix::identity(2)), Err(Error::Singular(_))));
    }

    #[test]
    fn hermitian_eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = random_matrix(&mut rng, 4, 4);
        let a = e.adjoint_mul(&e).unwrap();
        let (vals, v) = hermitian_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let dv = CMatrix::from_diag(&vals.iter().map(|&x| c(x, 0.0)).collect::<Vec<_>>());
        let rec = &(&v * &dv) * &v.adjoint();
        assert!(rec.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn four_point_stencil_is_exact_on_quartics() {
        let f = |x: &[f64]| x[0].powi(4) - 3.0 * x[0].powi(3);
        let x = 1.7;
        let g = 4.0 * x * x * x - 9.0 * x * x;
        let r = grad_check_with(f, &[g], &[x], 1e-2, Stencil::FourPoint).unwrap();
        assert!(r.max_rel_error < 1e-11, "{}", r.max_rel_error);
        let coarse = grad_check(f, &[g], &[x], 1e-2).unwrap();
        assert!(coarse.max_rel_error > 1e-6);
    }

    #[test]
    fn grad_check_quadratic() {
        let rep = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-6);
        assert_eq!(rep.param_count, 1);
        assert_eq!(rep.per_param_errors.len(), 1);
    }

    #[test]
    fn grad_check_rejects_bad_step_and_nan() {
        assert!(grad_check(|x| x[0], &[1.0], &[0.0], 0.0).is_err());
        assert!(matches!(grad_check(|_| f64::NAN, &[1.0], &[0.0], 1e-5), Err(Error::NonFinite(_))));
    }

    // 2x2 Hermitian X parameterised by (x11, x22, re x12, im x12).
    fn hermitian_2x2(p: &[f64]) -> CMatrix {
        let off = c(p[2], p[3]);
        CMatrix::from_row_major(2, 2, vec![c(p[0], 0.0), off, off.conj(), c(p[1], 0.0)]).unwrap()
    }

    // Gradient of a real function g(X) whose differential is Re Tr(G dX), in the
    // (x11, x22, re x12, im x12) coordinates.
    fn coords_from_differential(g: &CMatrix) -> Vec<f64> {
        let t = g[(1, 0)] + g[(0, 1)];
        let s = C64::i() * (g[(1, 0)] - g[(0, 1)]);
        vec![g[(0, 0)].re, g[(1, 1)].re, t.re, s.re]
    }

    #[test]
    fn grad_check_log_det_closed_form() {
        let point = [2.0, 3.0, 0.4, -0.7];
        let x = hermitian_2x2(&point);
        // d log det X = Tr(X^{-1} dX)
        let analytic = coords_from_differential(&x.inverse().unwrap());
        let rep = grad_check(|p| hermitian_2x2(p).log_det().unwrap().0, &analytic, &point, FD_STEP).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn grad_check_trace_inverse_closed_form() {
        let point = [1.5, 2.5, -0.3, 0.2];
        let x = hermitian_2x2(&point);
        let xi = x.inverse().unwrap();
        // d Tr(X^{-1}) = -Tr(X^{-1} dX X^{-1}) = Tr(-(X^{-2}) dX)
        let analytic = coords_from_differential(&(&xi * &xi).scale_real(-1.0));
        let rep =
            grad_check(|p| hermitian_2x2(p).inverse().unwrap().trace().re, &analytic, &point, FD_STEP).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
