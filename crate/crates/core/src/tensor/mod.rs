//! Dense row-major matrices, a reverse-mode tape, and the Adam optimizer.
//!
//! Everything is two-dimensional; scalars are 1x1 matrices. Element type is
//! generic over [`Float`] so the same model code runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

mod adam;
mod graph;

pub use adam::{adam_step, AdamState};
pub use graph::{AttnMask, Grads, Graph, ParamGrads, ParamId, ParamStore, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("every position is masked out of the loss")]
    AllPositionsMasked,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of matrices: `f32` or `f64`.
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A B + beta * C` over strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping buffers of
    /// the stated dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[F]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn scalar(x: F) -> Self {
        Self { rows: 1, cols: 1, data: vec![x] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_into(&mut out, F::one(), self, false, other, false, F::zero());
        Ok(out)
    }

    /// Row indices of the largest entry per row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|r| argmax(self.row(r))).collect()
    }

    pub fn cast<G: Float>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| F::from_f64(dist.sample(rng))).collect(),
        }
    }

    pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| F::from_f64(dist.sample(rng))).collect(),
        }
    }
}

pub fn argmax<F: Float>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `c = alpha * op(a) op(b) + beta * c`, where `op` optionally transposes.
pub(crate) fn gemm_into<F: Float>(
    c: &mut Matrix<F>,
    alpha: F,
    a: &Matrix<F>,
    ta: bool,
    b: &Matrix<F>,
    tb: bool,
    beta: F,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_assign(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: dimensions and strides were derived from the owning buffers above.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize along each row.
    Rows,
    /// Normalize along each column.
    Cols,
}

/// Numerically stable softmax (max subtraction) along `axis`.
pub fn softmax<F: Float>(m: &Matrix<F>, axis: Axis) -> Matrix<F> {
    match axis {
        Axis::Rows => {
            let mut out = m.clone();
            for r in 0..m.rows {
                softmax_in_place(out.row_mut(r));
            }
            out
        }
        Axis::Cols => softmax(&m.transpose(), Axis::Rows).transpose(),
    }
}

pub(crate) fn softmax_in_place<F: Float>(xs: &mut [F]) {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let x = Matrix::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]).unwrap();
        let ones = Matrix::from_rows(&[&[1.0f64], &[1.0]]).unwrap();
        assert_eq!(x.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        assert!(matches!(a.matmul(&a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn gemm_transposes() {
        let a = Matrix::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0f64, 0.5, -1.0], &[2.0, 0.0, 1.0]]).unwrap();
        let want = a.matmul(&b).unwrap();
        let mut c = Matrix::zeros(3, 3);
        gemm_into(&mut c, 1.0, &a.transpose(), true, &b.transpose(), true, 0.0);
        assert_eq!(c, want);
        let mut c = Matrix::filled(3, 3, 1.0);
        gemm_into(&mut c, 2.0, &a, false, &b.transpose(), true, 1.0);
        let expect = want.map(|x| 2.0 * x + 1.0);
        assert_eq!(c, expect);
    }

    #[test]
    fn softmax_values() {
        let m = Matrix::from_rows(&[&[0.0f64, 0.0]]).unwrap();
        assert_eq!(softmax(&m, Axis::Rows).data(), &[0.5, 0.5]);
        let m = Matrix::from_rows(&[&[1.0f64, 2.0, 3.0]]).unwrap();
        let s = softmax(&m, Axis::Rows);
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-8);
        }
        let shifted = softmax(&m.map(|x| x + 1000.0), Axis::Rows);
        assert!(shifted.max_abs_diff(&s) < 1e-12);
        let col = softmax(&m.transpose(), Axis::Cols);
        assert!(col.transpose().max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            vals in proptest::collection::vec(-50.0f32..50.0, 1..40),
        ) {
            let cols = vals.len().div_ceil(rows).max(1);
            let data: Vec<f32> = (0..rows * cols).map(|i| vals[i % vals.len()]).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let s = softmax(&m, Axis::Rows);
            for r in 0..rows {
                let sum: f32 = s.row(r).iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-5);
                proptest::prop_assert!(s.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
