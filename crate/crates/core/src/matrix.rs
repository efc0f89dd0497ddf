//! Dense row-major matrices in 64-bit floats.
//!
//! One sample per row throughout the crate: a feature batch is `m x p`, a
//! layer weight is `out x in`. No BLAS, no SIMD; the problem sizes here are
//! tiny and plain loops keep results bit-reproducible across platforms.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn shape_str(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: shape_str(rows, cols),
                right: format!("{} values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left: format!("row 0 has {cols} entries"),
                    right: format!("row {i} has {} entries", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn shape(&self) -> String {
        shape_str(self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Standard product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`; needs `self.cols == rhs.cols`.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                let b = rhs.row(j);
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    acc += x * y;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * rhs`; needs `self.rows == rhs.rows`.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = rhs.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &bj) in out_row.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * rhs`.
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                op: "axpy",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyInput("sum of an empty matrix"));
        }
        Ok(self.data.iter().sum())
    }

    pub fn mean(&self) -> Result<f64> {
        let s = self.sum()?;
        Ok(s / self.data.len() as f64)
    }

    /// Per-column mean over rows, returned as a `1 x cols` matrix.
    pub fn col_mean(&self) -> Result<Matrix> {
        if self.is_empty() {
            return Err(Error::EmptyInput("column mean of an empty matrix"));
        }
        let mut acc = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, &x) in acc.iter_mut().zip(self.row(r)) {
                *a += x;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for a in &mut acc {
            *a *= inv;
        }
        Matrix::from_vec(1, self.cols, acc)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        debug_assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of the given rows, in order (used for batch gathering).
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `top` over `bottom`.
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return Err(Error::DimensionMismatch {
                op: "vstack",
                left: top.shape(),
                right: bottom.shape(),
            });
        }
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * top.cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = Matrix::identity(2).matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message was: {msg}");
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(Matrix::zeros(3, 3).sum().unwrap(), 0.0);
        let m = Matrix::from_vec(1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(m.mean().unwrap(), 2.0);
        let m = Matrix::from_vec(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(m.col_mean().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reduce_empty_errors() {
        assert!(matches!(
            Matrix::zeros(0, 3).sum(),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            Matrix::zeros(3, 0).col_mean(),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn transpose_is_involution() {
        let mut rng = SeededRng::new(11);
        let a = rng
            .draw(4, 7, crate::rng::Dist::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10 {
            let norm = crate::rng::Dist::Normal { mean: 0.0, std: 1.0 };
            let a = rng.draw(3, 4, norm).unwrap();
            let b = rng.draw(4, 5, norm).unwrap();
            let c = rng.draw(5, 2, norm).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                assert!((l - r).abs() / scale < 1e-9);
            }
        }
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let mut rng = SeededRng::new(5);
        let norm = crate::rng::Dist::Normal { mean: 0.0, std: 1.0 };
        let a = rng.draw(3, 4, norm).unwrap();
        let b = rng.draw(5, 4, norm).unwrap();
        assert_eq!(a.matmul_nt(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        let c = rng.draw(3, 6, norm).unwrap();
        assert_eq!(a.matmul_tn(&c).unwrap(), a.transpose().matmul(&c).unwrap());
    }

    #[test]
    fn finite_after_ops_on_finite_inputs() {
        let mut rng = SeededRng::new(9);
        let norm = crate::rng::Dist::Normal { mean: 0.0, std: 10.0 };
        let a = rng.draw(6, 6, norm).unwrap();
        let b = rng.draw(6, 6, norm).unwrap();
        assert!(a.matmul(&b).unwrap().all_finite());
        assert!(a.add(&b).unwrap().all_finite());
        assert!(a.sub(&b).unwrap().all_finite());
        assert!(a.scale(-3.5).all_finite());
    }
}
