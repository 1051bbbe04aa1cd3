//! Dense row-major f32 matrix, the carrier for every numeric payload.
//!
//! Products accumulate in f64 and round once on store; rows of the output
//! are independent, so the parallel paths are bit-identical to the serial
//! ones for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

const PAR_ROW_THRESHOLD: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data; rejects length mismatches and non-finite
    /// values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("matrix contains non-finite values".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhsᵀ` — the workhorse for `x · Wᵀ` with row-major weights.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "matmul_nt: lhs is {}x{}, rhs is {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, m, k) = (self.rows, rhs.rows, self.cols);
        let mut out = vec![0.0f32; n * m];
        let body = |i: usize, out_row: &mut [f32]| {
            let a = &self.data[i * k..(i + 1) * k];
            for (j, slot) in out_row.iter_mut().enumerate() {
                let b = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += a[t] as f64 * b[t] as f64;
                }
                *slot = acc as f32;
            }
        };
        if n >= PAR_ROW_THRESHOLD {
            out.par_chunks_mut(m).enumerate().for_each(|(i, row)| body(i, row));
        } else {
            for (i, row) in out.chunks_mut(m).enumerate() {
                body(i, row);
            }
        }
        Ok(Matrix::from_vec_unchecked(n, m, out))
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul: lhs is {}x{}, rhs is {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, m, k) = (self.rows, rhs.cols, self.cols);
        let mut out = vec![0.0f32; n * m];
        let body = |i: usize, out_row: &mut [f32]| {
            let mut acc = vec![0.0f64; m];
            let a = &self.data[i * k..(i + 1) * k];
            for (t, &a_it) in a.iter().enumerate() {
                let b = &rhs.data[t * m..(t + 1) * m];
                let a_it = a_it as f64;
                for j in 0..m {
                    acc[j] += a_it * b[j] as f64;
                }
            }
            for j in 0..m {
                out_row[j] = acc[j] as f32;
            }
        };
        if n >= PAR_ROW_THRESHOLD {
            out.par_chunks_mut(m).enumerate().for_each(|(i, row)| body(i, row));
        } else {
            for (i, row) in out.chunks_mut(m).enumerate() {
                body(i, row);
            }
        }
        Ok(Matrix::from_vec_unchecked(n, m, out))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()))
    }

    pub fn frobenius_sq_diff(&self, rhs: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn matmul_nt_against_hand_loop() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let c = a.matmul_nt(&b).unwrap();
        assert_eq!(c.data(), &[4.0, 3.0, 10.0, 7.5]);
    }

    #[test]
    fn matmul_matches_transposed_nt() {
        let a = Matrix::from_fn(5, 4, |i, j| (i * 7 + j) as f32 * 0.25 - 2.0);
        let b = Matrix::from_fn(4, 3, |i, j| (i + 2 * j) as f32 * 0.5 - 1.0);
        let via_nt = a.matmul_nt(&b.transpose()).unwrap();
        let direct = a.matmul(&b).unwrap();
        assert!(direct.max_abs_diff(&via_nt) < 1e-6);
    }

    #[test]
    fn parallel_rows_match_serial() {
        let a = Matrix::from_fn(130, 9, |i, j| ((i * 31 + j * 17) % 13) as f32 - 6.0);
        let b = Matrix::from_fn(8, 9, |i, j| ((i * 5 + j) % 7) as f32 * 0.125);
        let big = a.matmul_nt(&b).unwrap();
        for i in 0..a.rows() {
            let single = Matrix::from_vec(1, 9, a.row(i).to_vec()).unwrap();
            let r = single.matmul_nt(&b).unwrap();
            assert_eq!(r.data(), big.row(i));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(a.matmul_nt(&b), Err(Error::Dimension(_))));
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }
}
