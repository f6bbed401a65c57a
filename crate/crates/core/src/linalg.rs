//! Small dense linear-algebra helpers on row-major square matrices.

use crate::error::{Error, Result};
use crate::real::Real;

/// LU factorization with partial pivoting of an `n x n` row-major matrix.
#[derive(Clone, Debug)]
pub struct Lu<F> {
    n: usize,
    lu: Vec<F>,
    perm: Vec<usize>,
}

impl<F: Real> Lu<F> {
    pub fn factor(n: usize, mut a: Vec<F>) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[col * n + col].abs();
            for row in col + 1..n {
                let v = a[row * n + col].abs();
                if v > best {
                    best = v;
                    pivot = row;
                }
            }
            if best == F::zero() || !best.is_finite() {
                return Err(Error::domain(format!("singular matrix at column {col}")));
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                perm.swap(col, pivot);
            }
            let d = a[col * n + col];
            for row in col + 1..n {
                let f = a[row * n + col] / d;
                a[row * n + col] = f;
                if f != F::zero() {
                    for j in col + 1..n {
                        let u = a[col * n + j];
                        a[row * n + j] = a[row * n + j] - f * u;
                    }
                }
            }
        }
        Ok(Lu { n, lu: a, perm })
    }

    /// Solves `A X = B` for an `n x m` right-hand side.
    pub fn solve(&self, b: &[F], m: usize) -> Vec<F> {
        let n = self.n;
        assert_eq!(b.len(), n * m);
        let mut x = vec![F::zero(); n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != F::zero() {
                    for j in 0..m {
                        let v = x[k * m + j];
                        x[i * m + j] = x[i * m + j] - l * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != F::zero() {
                    for j in 0..m {
                        let v = x[k * m + j];
                        x[i * m + j] = x[i * m + j] - u * v;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] = x[i * m + j] / d;
            }
        }
        x
    }

    /// Solves `Aᵀ X = B` for an `n x m` right-hand side.
    pub fn solve_transposed(&self, b: &[F], m: usize) -> Vec<F> {
        let n = self.n;
        assert_eq!(b.len(), n * m);
        // P A = L U  =>  Aᵀ = Uᵀ Lᵀ P
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                if u != F::zero() {
                    for j in 0..m {
                        let v = y[k * m + j];
                        y[i * m + j] = y[i * m + j] - u * v;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                y[i * m + j] = y[i * m + j] / d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[k * n + i];
                if l != F::zero() {
                    for j in 0..m {
                        let v = y[k * m + j];
                        y[i * m + j] = y[i * m + j] - l * v;
                    }
                }
            }
        }
        let mut x = vec![F::zero(); n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&y[i * m..(i + 1) * m]);
        }
        x
    }
}

pub fn identity<F: Real>(n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * n];
    for i in 0..n {
        out[i * n + i] = F::one();
    }
    out
}

/// Row-major `(m x k) * (k x n)`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d = *d + av * bv;
            }
        }
    }
    out
}

pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    assert_eq!(a.len(), rows * cols);
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn frobenius<F: Real>(a: &[F]) -> F {
    a.iter().map(|&v| v * v).sum::<F>().sqrt()
}

/// `‖AᵀA − I‖_F` for a square matrix.
pub fn orthogonality_defect<F: Real>(a: &[F], n: usize) -> F {
    let at = transpose(a, n, n);
    let mut g = matmul(&at, a, n, n, n);
    for i in 0..n {
        g[i * n + i] = g[i * n + i] - F::one();
    }
    frobenius(&g)
}

/// Determinant via LU; zero for singular input.
pub fn determinant<F: Real>(a: &[F], n: usize) -> F {
    match Lu::factor(n, a.to_vec()) {
        Ok(lu) => {
            let mut det = F::one();
            for i in 0..n {
                det = det * lu.lu[i * n + i];
            }
            let mut visited = vec![false; n];
            let mut sign = F::one();
            for start in 0..n {
                if visited[start] {
                    continue;
                }
                let mut len = 0;
                let mut j = start;
                while !visited[j] {
                    visited[j] = true;
                    j = lu.perm[j];
                    len += 1;
                }
                if len % 2 == 0 {
                    sign = -sign;
                }
            }
            sign * det
        }
        Err(_) => F::zero(),
    }
}

/// Orthonormal basis (as columns of an `n x k` matrix) of the span of the given
/// vectors, by modified Gram–Schmidt with relative drop tolerance.
pub fn orthonormal_basis(vectors: &[Vec<f64>], n: usize, tol: f64) -> Vec<Vec<f64>> {
    let scale = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        assert_eq!(v.len(), n);
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= d * qi;
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol * scale.max(f64::MIN_POSITIVE) {
            for wi in &mut w {
                *wi /= norm;
            }
            basis.push(w);
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_and_transposed_solves() {
        let a: Vec<f64> = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let lu = Lu::factor(3, a.clone()).unwrap();
        let b: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = lu.solve(&b, 2);
        let back = matmul(&a, &x, 3, 3, 2);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let xt = lu.solve_transposed(&b, 2);
        let at = transpose(&a, 3, 3);
        let back = matmul(&at, &xt, 3, 3, 2);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_a_domain_error() {
        assert!(Lu::<f64>::factor(2, vec![1.0, 2.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn determinant_of_permutation() {
        let p = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(determinant(&p, 2), -1.0);
        assert!((determinant(&identity::<f64>(4), 4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_schmidt_drops_dependent_vectors() {
        let vs = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]];
        let b = orthonormal_basis(&vs, 3, 1e-10);
        assert_eq!(b.len(), 2);
    }
}
