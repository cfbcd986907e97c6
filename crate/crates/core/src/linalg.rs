//! Dense row-major matrices and the few kernels the simulator needs.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Lower-triangular factor `F` with `F Fᵀ = self` for a symmetric
    /// positive semidefinite matrix.
    ///
    /// A pivot that vanishes up to `tol` zeroes its column instead of failing,
    /// so rank-deficient covariances (co-located UEs, zero variance) factor
    /// exactly. A pivot below `-tol` means the input is not PSD.
    pub fn cholesky_psd(&self, tol: T) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::shape("cholesky of a non-square matrix"));
        }
        let n = self.rows;
        let mut f = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for p in 0..j {
                d -= f[(j, p)] * f[(j, p)];
            }
            if d < -tol {
                return Err(Error::Numerical(format!(
                    "covariance is not positive semidefinite (pivot {j} = {d})"
                )));
            }
            if d <= tol {
                continue;
            }
            let djj = d.sqrt();
            f[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for p in 0..j {
                    s -= f[(i, p)] * f[(j, p)];
                }
                f[(i, j)] = s / djj;
            }
        }
        Ok(f)
    }
}

impl<T> Matrix<T> {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `out = W x + b` for a row-major `rows x cols` weight slice.
#[inline]
pub(crate) fn affine<T: Scalar>(w: &[T], cols: usize, x: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (&wv, &xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// `out += W x` without bias.
#[inline]
pub(crate) fn gemv_acc<T: Scalar>(w: &[T], cols: usize, x: &[T], out: &mut [T]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (&wv, &xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o += acc;
    }
}

/// `out += Wᵀ d` where `W` is `d.len() x out.len()`.
#[inline]
pub(crate) fn gemv_t_acc<T: Scalar>(w: &[T], d: &[T], out: &mut [T]) {
    let cols = out.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * dr;
        }
    }
}

/// `G += d xᵀ` where `G` is `d.len() x x.len()`.
#[inline]
pub(crate) fn outer_acc<T: Scalar>(g: &mut [T], d: &[T], x: &[T]) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == T::zero() {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gv, &xv) in row.iter_mut().zip(x) {
            *gv += dr * xv;
        }
    }
}
