//! Minimal row-major matrix type and the handful of kernels the transformer
//! needs. Loops are ordered so the inner dimension is contiguous; with
//! opt-level 3 the compiler vectorizes them well enough for desk scale.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn iter_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out = a @ b` where a is m×k and b is k×n. `out` is overwritten.
pub fn matmul<F: Scalar>(out: &mut Mat<F>, a: &Mat<F>, b: &Mat<F>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.cols);
    out.fill(F::zero());
    matmul_acc(out, a, b);
}

/// `out += a @ b`.
pub fn matmul_acc<F: Scalar>(out: &mut Mat<F>, a: &Mat<F>, b: &Mat<F>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ @ b` where a is k×m and b is k×n (so out is m×n).
pub fn matmul_at_acc<F: Scalar>(out: &mut Mat<F>, a: &Mat<F>, b: &Mat<F>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(out.rows, a.cols);
    assert_eq!(out.cols, b.cols);
    let (k, m, n) = (a.rows, a.cols, b.cols);
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a @ bᵀ` where a is m×k and b is n×k (so out is m×n). Overwrites.
pub fn matmul_bt<F: Scalar>(out: &mut Mat<F>, a: &Mat<F>, b: &Mat<F>) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out.data[i * n + j] = acc;
        }
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out += s * a`, elementwise over slices.
#[inline]
pub fn axpy<F: Scalar>(out: &mut [F], s: F, a: &[F]) {
    debug_assert_eq!(out.len(), a.len());
    for (o, &x) in out.iter_mut().zip(a) {
        *o += s * x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut out = Mat::zeros(2, 2);
        matmul(&mut out, &a, &b);
        assert_eq!(out.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposes_agree() {
        // aᵀ@b and a@bᵀ checked against plain matmul on explicit transposes.
        let a = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
        let mut at = Mat::zeros(2, 3);
        for i in 0..3 {
            for j in 0..2 {
                at.set(j, i, a.get(i, j));
            }
        }
        let mut want = Mat::zeros(2, 2);
        matmul(&mut want, &at, &b);
        let mut got = Mat::zeros(2, 2);
        matmul_at_acc(&mut got, &a, &b);
        assert_eq!(got.data, want.data);

        let c = Mat::from_vec(2, 3, vec![1.0, 0.0, 2.0, -1.0, 3.0, 1.0]);
        let d = Mat::from_vec(4, 3, vec![1.0; 12]);
        let mut dt = Mat::zeros(3, 4);
        for i in 0..4 {
            for j in 0..3 {
                dt.set(j, i, d.get(i, j));
            }
        }
        let mut want2 = Mat::zeros(2, 4);
        matmul(&mut want2, &c, &dt);
        let mut got2 = Mat::zeros(2, 4);
        matmul_bt(&mut got2, &c, &d);
        assert_eq!(got2.data, want2.data);
    }
}
