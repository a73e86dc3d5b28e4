//! Dense vectors, row-major matrices, reproducible randomness and the small
//! amount of linear algebra the samplers need.

mod linalg;
mod rng;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use linalg::{pseudo_inverse, qr_householder, random_orthogonal, solve_linear, PIVOT_TOLERANCE};
pub use rng::{derive_seed, Rng};

/// Owned vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vec64 {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for Vec64 {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vec64 {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.normal()).collect(),
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat64 {
        let mut t = Mat64::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Mat64::zeros(self.rows, other.cols);
        gemm(
            1.0,
            MatRef::normal(self),
            MatRef::normal(other),
            0.0,
            &mut out,
        );
        Ok(out)
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec64> {
        if self.cols != x.len() {
            return Err(Error::DimMismatch {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok(Vec64((0..self.rows).map(|i| dot(self.row(i), x)).collect()))
    }

    /// `selfᵀ * x`.
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec64> {
        if self.rows != x.len() {
            return Err(Error::DimMismatch {
                expected: self.rows,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        Ok(Vec64(out))
    }

    pub fn sub(&self, other: &Mat64) -> Result<Mat64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Mat64 {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat64 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat64 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Borrowed matrix operand, optionally viewed transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    mat: &'a Mat64,
    transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn normal(mat: &'a Mat64) -> Self {
        Self {
            mat,
            transposed: false,
        }
    }

    pub fn transposed(mat: &'a Mat64) -> Self {
        Self {
            mat,
            transposed: true,
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.mat.cols, self.mat.rows)
        } else {
            (self.mat.rows, self.mat.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.mat.cols as isize)
        } else {
            (self.mat.cols as isize, 1)
        }
    }
}

/// `c = alpha * a * b + beta * c`, dispatched to `matrixmultiply`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut Mat64) {
    let (m, k) = a.shape();
    let (kb, n) = b.shape();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((m, n), c.shape(), "output shape differs");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the pointers come from live slices whose lengths match the
    // dimensions and strides checked above; `c` does not alias `a` or `b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.mat.data.as_ptr(),
            rsa,
            csa,
            b.mat.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let mut rng = Rng::new(1);
        let a = Mat64::gaussian(4, 3, &mut rng);
        let b = Mat64::gaussian(5, 3, &mut rng);
        let mut c = Mat64::zeros(4, 5);
        gemm(1.0, MatRef::normal(&a), MatRef::transposed(&b), 0.0, &mut c);
        for i in 0..4 {
            for j in 0..5 {
                let naive: f64 = (0..3).map(|k| a[(i, k)] * b[(j, k)]).sum();
                assert!((c[(i, j)] - naive).abs() < 1e-14);
            }
        }
        let bt = b.transpose();
        assert!(a.matmul(&bt).unwrap().sub(&c).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn matvec_dims_checked() {
        let a = Mat64::zeros(2, 3);
        assert!(matches!(
            a.matvec(&[1.0, 2.0]),
            Err(Error::DimMismatch { expected: 3, actual: 2 })
        ));
        let t = a.matvec_transposed(&[1.0, 1.0]).unwrap();
        assert_eq!(t.len(), 3);
    }
}
