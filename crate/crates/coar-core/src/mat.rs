//! Dense row-major f64 matrices and the three multiply kernels the model
//! needs.
//!
//! Weight matrices are stored `[in, out]`, so the forward pass `y = x W`,
//! the input gradient `dx = dy Wᵀ`, and the weight gradient `dw = xᵀ dy`
//! each walk every operand row-contiguously:
//!
//! - [`mm`] streams rows of `w` against a hot accumulator row of `y`.
//! - [`mm_abt`] is a dot product of two contiguous rows per output cell.
//! - [`mm_atb_acc`] accumulates rank-1 updates row by row.

use crate::math::{axpy, dot};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// Frobenius dot with another matrix of the same shape.
    pub fn frob_dot(&self, other: &Mat) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        dot(&self.data, &other.data)
    }
}

/// `y = x w`, overwriting `y`. Shapes: x `[r, k]`, w `[k, c]`, y `[r, c]`.
pub fn mm(x: &Mat, w: &Mat, y: &mut Mat) {
    assert_eq!(x.cols, w.rows, "mm inner dim");
    assert_eq!(y.rows, x.rows, "mm out rows");
    assert_eq!(y.cols, w.cols, "mm out cols");
    for r in 0..x.rows {
        let yr = &mut y.data[r * y.cols..(r + 1) * y.cols];
        yr.iter_mut().for_each(|v| *v = 0.0);
        let xr = &x.data[r * x.cols..(r + 1) * x.cols];
        for (k, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                axpy(yr, xv, &w.data[k * w.cols..(k + 1) * w.cols]);
            }
        }
    }
}

/// `y = a bᵀ`, overwriting `y`. Shapes: a `[r, k]`, b `[c, k]`, y `[r, c]`.
pub fn mm_abt(a: &Mat, b: &Mat, y: &mut Mat) {
    assert_eq!(a.cols, b.cols, "mm_abt inner dim");
    assert_eq!(y.rows, a.rows, "mm_abt out rows");
    assert_eq!(y.cols, b.rows, "mm_abt out cols");
    for r in 0..a.rows {
        let ar = a.row(r);
        let yr = &mut y.data[r * b.rows..(r + 1) * b.rows];
        for (c, yv) in yr.iter_mut().enumerate() {
            *yv = dot(ar, &b.data[c * b.cols..(c + 1) * b.cols]);
        }
    }
}

/// `y += a bᵀ`. Shapes as in [`mm_abt`].
pub fn mm_abt_acc(a: &Mat, b: &Mat, y: &mut Mat) {
    assert_eq!(a.cols, b.cols, "mm_abt_acc inner dim");
    assert_eq!(y.rows, a.rows, "mm_abt_acc out rows");
    assert_eq!(y.cols, b.rows, "mm_abt_acc out cols");
    for r in 0..a.rows {
        let ar = a.row(r);
        let yr = &mut y.data[r * b.rows..(r + 1) * b.rows];
        for (c, yv) in yr.iter_mut().enumerate() {
            *yv += dot(ar, &b.data[c * b.cols..(c + 1) * b.cols]);
        }
    }
}

/// `out += xᵀ dy`. Shapes: x `[r, k]`, dy `[r, c]`, out `[k, c]`.
pub fn mm_atb_acc(x: &Mat, dy: &Mat, out: &mut Mat) {
    assert_eq!(x.rows, dy.rows, "mm_atb shared rows");
    assert_eq!(out.rows, x.cols, "mm_atb out rows");
    assert_eq!(out.cols, dy.cols, "mm_atb out cols");
    for r in 0..x.rows {
        let xr = &x.data[r * x.cols..(r + 1) * x.cols];
        let dyr = &dy.data[r * dy.cols..(r + 1) * dy.cols];
        for (k, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                axpy(&mut out.data[k * out.cols..(k + 1) * out.cols], xv, dyr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
        Mat::from_vec(rows, cols, data)
    }

    fn naive_mm(x: &Mat, w: &Mat) -> Mat {
        let mut y = Mat::zeros(x.rows, w.cols);
        for r in 0..x.rows {
            for c in 0..w.cols {
                let mut s = 0.0;
                for k in 0..x.cols {
                    s += x.get(r, k) * w.get(k, c);
                }
                y.set(r, c, s);
            }
        }
        y
    }

    #[test]
    fn mm_matches_naive() {
        let mut rng = Rng::from_u64(1);
        let x = random(&mut rng, 7, 13);
        let w = random(&mut rng, 13, 5);
        let mut y = Mat::zeros(7, 5);
        mm(&x, &w, &mut y);
        let want = naive_mm(&x, &w);
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mm_abt_matches_transposed_mm() {
        let mut rng = Rng::from_u64(2);
        let a = random(&mut rng, 6, 9);
        let b = random(&mut rng, 4, 9);
        let mut y = Mat::zeros(6, 4);
        mm_abt(&a, &b, &mut y);
        // bᵀ explicitly
        let mut bt = Mat::zeros(9, 4);
        for r in 0..4 {
            for c in 0..9 {
                bt.set(c, r, b.get(r, c));
            }
        }
        let want = naive_mm(&a, &bt);
        for (u, v) in y.data.iter().zip(&want.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mm_atb_accumulates() {
        let mut rng = Rng::from_u64(3);
        let x = random(&mut rng, 8, 3);
        let dy = random(&mut rng, 8, 5);
        let mut out = Mat::zeros(3, 5);
        mm_atb_acc(&x, &dy, &mut out);
        mm_atb_acc(&x, &dy, &mut out);
        // xᵀ explicitly, doubled
        let mut xt = Mat::zeros(3, 8);
        for r in 0..8 {
            for c in 0..3 {
                xt.set(c, r, x.get(r, c));
            }
        }
        let want = naive_mm(&xt, &dy);
        for (u, v) in out.data.iter().zip(&want.data) {
            assert!((u - 2.0 * v).abs() < 1e-12);
        }
    }
}
