use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// `out += self[:, col_start..col_start+x.len()] * x`
    pub fn matvec_cols_acc(&self, col_start: usize, x: &[T], out: &mut [T]) {
        debug_assert!(col_start + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols + col_start..r * self.cols + col_start + x.len()];
            let mut acc = T::zero();
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            *o += acc;
        }
    }

    /// `out += self^T[col_start.., :] * y`, i.e. the transpose product restricted to a column block.
    pub fn tmatvec_cols_acc(&self, col_start: usize, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        for (r, yr) in y.iter().enumerate() {
            if yr.is_zero() {
                continue;
            }
            let row = &self.data[r * self.cols + col_start..r * self.cols + col_start + out.len()];
            for (o, w) in out.iter_mut().zip(row) {
                *o += *yr * *w;
            }
        }
    }

    /// `self[:, col_start..] += s * y x^T`
    pub fn add_outer_cols(&mut self, col_start: usize, s: T, y: &[T], x: &[T]) {
        debug_assert_eq!(y.len(), self.rows);
        for (r, yr) in y.iter().enumerate() {
            let f = s * *yr;
            if f.is_zero() {
                continue;
            }
            let row = &mut self.data[r * self.cols + col_start..r * self.cols + col_start + x.len()];
            for (w, xi) in row.iter_mut().zip(x) {
                *w += f * *xi;
            }
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
