//! Small dense symmetric matrices and a cyclic Jacobi eigensolver.
//!
//! The matrices handled here are at most a few tens of rows (the 4×4
//! state-space representations), so Jacobi rotations are both accurate to
//! a few ulps and fast enough.

use crate::scalar::Scalar;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.n, rhs.n, "dimension mismatch");
        let n = self.n;
        Self::from_fn(n, |i, j| (0..n).map(|k| self[(i, k)] * rhs[(k, j)]).sum())
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.n).map(|i| self[(i, j)]).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    fn off_diagonal_norm_sq(&self) -> T {
        let mut s = T::zero();
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s = s + self[(i, j)] * self[(i, j)];
                }
            }
        }
        s
    }

    fn frobenius_norm_sq(&self) -> T {
        self.data.iter().map(|x| *x * *x).sum()
    }
}

impl<T> std::ops::Index<(usize, usize)> for SquareMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.n + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for SquareMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.n + j]
    }
}

/// Eigen-decomposition `A = V diag(values) Vᵀ` of a symmetric matrix.
/// Eigenvectors are the columns of `vectors`; values are sorted ascending.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: SquareMatrix<T>,
}

const MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigensolver. Only the symmetric part of `a` is meaningful.
pub fn symmetric_eigen<T: Scalar>(a: &SquareMatrix<T>) -> SymmetricEigen<T> {
    let n = a.dim();
    let mut m = SquareMatrix::from_fn(n, |i, j| (a[(i, j)] + a[(j, i)]) * T::lit(0.5));
    let mut v = SquareMatrix::identity(n);
    let scale = m.frobenius_norm_sq();
    let stop = scale * T::epsilon() * T::epsilon();

    for _ in 0..MAX_SWEEPS {
        if m.off_diagonal_norm_sq() <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = SquareMatrix::from_fn(n, |r, c| v[(r, order[c])]);
    SymmetricEigen { values, vectors }
}

/// Σ|λ| of a symmetric matrix.
pub fn trace_norm<T: Scalar>(a: &SquareMatrix<T>) -> T {
    symmetric_eigen(a).values.iter().map(|x| x.abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(e: &SymmetricEigen<f64>) -> SquareMatrix<f64> {
        let n = e.values.len();
        let d = SquareMatrix::<f64>::from_fn(n, |i, j| if i == j { e.values[i] } else { 0.0 });
        e.vectors.matmul(&d).matmul(&e.vectors.transpose())
    }

    #[test]
    fn diagonal_matrix_is_its_own_decomposition() {
        let a = SquareMatrix::<f64>::from_fn(3, |i, j| if i == j { [3.0, -1.0, 2.0][i] } else { 0.0 });
        let e = symmetric_eigen(&a);
        assert_eq!(e.values, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let a = SquareMatrix::<f64>::from_fn(2, |i, j| if i == j { 2.0 } else { 1.0 });
        let e = symmetric_eigen(&a);
        assert!((e.values[0] - 1.0).abs() < 1e-15);
        assert!((e.values[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn reconstructs_dense_matrix_and_vectors_are_orthonormal() {
        let a = SquareMatrix::<f64>::from_fn(6, |i, j| {
            let (i, j) = (i as f64, j as f64);
            (i + j).cos() + 0.1 * i * j
        });
        let e = symmetric_eigen(&a);
        assert!(reconstruct(&e).max_abs_diff(&a) < 1e-13);
        let vtv = e.vectors.transpose().matmul(&e.vectors);
        assert!(vtv.max_abs_diff(&SquareMatrix::identity(6)) < 1e-14);
    }

    #[test]
    fn matches_nalgebra_on_hilbert_matrix() {
        let n = 5;
        let a = SquareMatrix::<f64>::from_fn(n, |i, j| 1.0 / (i + j + 1) as f64);
        let na = nalgebra::DMatrix::from_fn(n, n, |i, j| 1.0 / (i + j + 1) as f64);
        let mut reference: Vec<f64> = na.symmetric_eigenvalues().iter().copied().collect();
        reference.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ours = symmetric_eigen(&a).values;
        for (x, y) in ours.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn trace_norm_of_indefinite_matrix() {
        let a = SquareMatrix::<f64>::from_fn(2, |i, j| if i == j { 0.0 } else { 1.0 });
        assert!((trace_norm(&a) - 2.0).abs() < 1e-15);
    }
}
