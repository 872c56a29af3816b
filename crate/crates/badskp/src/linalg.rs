//! Small dense linear algebra on row-major matrices.
//!
//! Everything here is a plain loop over a flat `Vec<T>`; the model sizes in
//! this crate are tiny (dimensions in the tens, sequences in the hundreds)
//! so clarity wins over blocking tricks.

use crate::scalar::{cast, Scalar};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut m = Mat::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "ragged rows");
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "flat buffer has wrong length");
        Mat { rows, cols, data }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = cast(z * std);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C = self * other, shapes (m×k)·(k×n).
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in arow.iter().enumerate() {
                let brow = other.row(k);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// C = self * otherᵀ, shapes (m×k)·(n×k)ᵀ.
    pub fn matmul_tb(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols, "matmul_tb inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(arow, other.row(j));
            }
        }
        out
    }

    /// C = selfᵀ * other, shapes (k×m)ᵀ·(k×n). Used for weight gradients.
    pub fn matmul_ta(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "matmul_ta inner dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = other.row(i);
            for (k, &a) in arow.iter().enumerate() {
                let crow = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (c, &b) in crow.iter_mut().zip(brow.iter()) {
                    *c = *c + a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: T, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in self.data.iter_mut() {
            *a = *a * alpha;
        }
    }

    /// Vertical stack: rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols, "vstack col mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        s = s + x * y;
    }
    s
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero magnitude.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// y += alpha * x for slices.
pub fn axpy_slice<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * xi;
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax_tie_lowest<T: Scalar>(xs: &[T]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// log(sum(exp(xs))) with max-shift for stability.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return T::neg_infinity();
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place softmax over a slice.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x = *x / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_matches_hand_computed_2x2() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.row(0), &[19.0, 22.0]);
        assert_eq!(c.row(1), &[43.0, 50.0]);
    }

    #[test]
    fn transpose_variants_agree_with_plain_matmul() {
        let a = Mat::<f64>::from_fn(3, 4, |i, j| (i * 7 + j) as f64 * 0.3 - 1.0);
        let b = Mat::<f64>::from_fn(3, 5, |i, j| (i + j * 2) as f64 * 0.1);
        // aᵀ·b via matmul_ta vs explicit transpose.
        let at = Mat::from_fn(4, 3, |i, j| a.row(j)[i]);
        let want = at.matmul(&b);
        let got = a.matmul_ta(&b);
        for i in 0..4 {
            for j in 0..5 {
                assert_relative_eq!(got.row(i)[j], want.row(i)[j], max_relative = 1e-12);
            }
        }
        // a·cᵀ via matmul_tb.
        let c = Mat::<f64>::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.2);
        let ct = Mat::from_fn(4, 6, |i, j| c.row(j)[i]);
        let want2 = a.matmul(&ct);
        let got2 = a.matmul_tb(&c);
        for i in 0..3 {
            for j in 0..6 {
                assert_relative_eq!(got2.row(i)[j], want2.row(i)[j], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let v = vec![0.3, -1.2, 2.5, 0.01];
        let c: f64 = cosine(&v, &v).unwrap();
        assert!((c - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cosine_of_zero_vector_is_none() {
        let z = vec![0.0; 3];
        let v = vec![1.0, 2.0, 3.0];
        assert!(cosine::<f64>(&z, &v).is_none());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_tie_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_tie_lowest(&[5.0]), 0);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let xs = vec![1000.0f64, 1000.0, 1000.0];
        let got = log_sum_exp(&xs);
        assert_relative_eq!(got, 1000.0 + 3.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut xs = vec![0.1f64, -2.0, 3.5, 0.0];
        softmax_in_place(&mut xs);
        let s: f64 = xs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(xs.iter().all(|&p| p > 0.0));
    }
}
