//! Dense row-major matrices sized for the tiny reference backend.
//!
//! Nothing here is tuned for large models; the whole toolkit runs on
//! matrices of at most a few hundred rows, so plain triple loops are the
//! clearest correct choice.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(S::zero());
    }

    /// self * other, (m x k) * (k x n) -> (m x n).
    pub fn matmul(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == S::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow.iter()) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// y = self * x, treating x as a column vector of length cols.
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.cols, "matvec shape mismatch");
        let mut y = vec![S::zero(); self.rows];
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = dot(self.row(r), x);
        }
        y
    }

    pub fn transpose(&self) -> Matrix<S> {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// y = selfᵀ * x, treating x as a column vector of length rows.
    /// Saves materializing the transpose in gradient passes.
    pub fn matvec_t(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.rows, "matvec_t shape mismatch");
        let mut y = vec![S::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == S::zero() {
                continue;
            }
            let row = self.row(r);
            for (yv, &w) in y.iter_mut().zip(row.iter()) {
                *yv += w * xr;
            }
        }
        y
    }

    /// self += other * scale, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix<S>, scale: S) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (d, &s) in self.data.iter_mut().zip(other.data.iter()) {
            *d += s * scale;
        }
    }

    /// Rank-1 update: self[r] += x[r] * y, the outer-product accumulation
    /// used by weight-gradient passes.
    pub fn add_outer(&mut self, x: &[S], y: &[S]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == S::zero() {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (d, &yv) in row.iter_mut().zip(y.iter()) {
                *d += xr * yv;
            }
        }
    }

    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        out
    }

    pub fn from_f32_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != rows * cols * 4 {
            return None;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| S::of_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Some(Self { rows, cols, data })
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

/// Normalize in place to unit L2 norm. A zero vector is left unchanged.
pub fn l2_normalize<S: Scalar>(v: &mut [S]) {
    let n = l2_norm(v);
    if n > S::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_matches_hand_computation() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = Matrix::from_vec(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matvec_agrees_with_matmul() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = vec![1.0, 0.5, -1.0];
        let col = Matrix::from_vec(3, 1, x.clone());
        let via_matmul: Vec<f64> = a.matmul(&col).data().to_vec();
        assert_eq!(a.matvec(&x), via_matmul);
    }

    #[test]
    fn f32_byte_round_trip_is_exact() {
        let m = Matrix::from_vec(2, 2, vec![0.5f32, -1.25, 3.0, 0.0]);
        let back = Matrix::<f32>::from_f32_le_bytes(2, 2, &m.to_f32_le_bytes()).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #[test]
        fn transpose_of_product_is_reversed_product(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let a = Matrix::from_vec(2, 3, a);
            let b = Matrix::from_vec(3, 2, b);
            let lhs = a.matmul(&b).transpose();
            let rhs = b.transpose().matmul(&a.transpose());
            for (x, y) in lhs.data().iter().zip(rhs.data().iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn normalized_vectors_have_unit_norm(v in proptest::collection::vec(-5.0f64..5.0, 1..16)) {
            let mut v = v;
            prop_assume!(l2_norm(&v) > 1e-6);
            l2_normalize(&mut v);
            prop_assert!((l2_norm(&v) - 1.0).abs() < 1e-9);
        }
    }
}
