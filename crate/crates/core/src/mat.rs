//! Dense row-major matrix, the working container for frames, vertices and weights.

use crate::error::{Result, VocaError};
use crate::scalar::Scalar;

/// Row-major dense matrix over a [`Scalar`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VocaError::Parameter(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Build from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum of two equally shaped matrices.
    pub fn add(&self, other: &Mat<S>) -> Result<Mat<S>> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Mat<S>) -> Result<Mat<S>> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: S) -> Mat<S> {
        self.map(|v| v * factor)
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Mat<S>) -> Result<Mat<S>> {
        if self.cols != other.rows {
            return Err(VocaError::Parameter(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = out.row_mut(r);
            for (k, &l) in lhs.iter().enumerate() {
                let rhs = other.row(k);
                for (d, &v) in rhs.iter().enumerate() {
                    dst[d] = dst[d] + l * v;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_at(&self, other: &Mat<S>) -> Result<Mat<S>> {
        if self.rows != other.rows {
            return Err(VocaError::Parameter(format!(
                "matmul_at shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for b in 0..self.rows {
            let lhs = self.row(b);
            let rhs = other.row(b);
            for (j, &l) in lhs.iter().enumerate() {
                let dst = out.row_mut(j);
                for (d, &v) in rhs.iter().enumerate() {
                    dst[d] = dst[d] + l * v;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_bt(&self, other: &Mat<S>) -> Result<Mat<S>> {
        if self.cols != other.cols {
            return Err(VocaError::Parameter(format!(
                "matmul_bt shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = out.row_mut(r);
            for j in 0..other.rows {
                let rhs = other.row(j);
                let mut acc = S::zero();
                for (a, b) in lhs.iter().zip(rhs) {
                    acc = acc + *a * *b;
                }
                dst[j] = acc;
            }
        }
        Ok(out)
    }

    /// Sum over rows, one value per column.
    pub fn col_sums(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for r in 0..self.rows {
            for (acc, &v) in out.iter_mut().zip(self.row(r)) {
                *acc = *acc + v;
            }
        }
        out
    }

    /// Squared Frobenius norm accumulated in f64.
    pub fn frob_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_c();
                x * x
            })
            .sum()
    }

    /// Convert element type through f64.
    pub fn convert<T: Scalar>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64_c(v.to_f64_c())).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Mat<S>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(VocaError::Parameter(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &S {
        &self.data[r * self.cols + c]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut S {
        &mut self.data[r * self.cols + c]
    }
}
