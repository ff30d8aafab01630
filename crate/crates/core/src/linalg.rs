//! Dense symmetric positive-definite linear algebra on `ndarray` storage.
//!
//! The dimensions in this crate are small (a handful of parameters per
//! block), so a plain Cholesky factorization covers every need: solves,
//! inverses, log-determinants, and positive-definiteness checks. Failure to
//! factor is reported as `None` rather than an error because callers attach
//! their own meaning (reject a sample covariance, skip an update, escalate
//! jitter).

use ndarray::{Array1, Array2};

use crate::Real;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<F> {
    l: Array2<F>,
}

impl<F: Real> Cholesky<F> {
    /// Factors `a` as `L L^T`.
    ///
    /// Returns `None` when `a` is not square, contains non-finite entries, or
    /// is not numerically positive definite. Only the lower triangle of `a`
    /// is read.
    pub fn decompose(a: &Array2<F>) -> Option<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return None;
        }
        let mut l = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    // `s > 0` is false for NaN, so this also rejects
                    // non-finite input.
                    if !(s > F::zero()) || !s.is_finite() {
                        return None;
                    }
                    l[[i, i]] = s.sqrt();
                } else {
                    l[[i, j]] = s / l[[j, j]];
                }
            }
        }
        Some(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `A x = b` by forward and back substitution.
    pub fn solve(&self, b: &Array1<F>) -> Array1<F> {
        let n = self.dim();
        assert_eq!(b.len(), n, "solve rhs has wrong length");
        let mut y = b.clone();
        for i in 0..n {
            for k in 0..i {
                let t = self.l[[i, k]] * y[k];
                y[i] -= t;
            }
            y[i] /= self.l[[i, i]];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let t = self.l[[k, i]] * y[k];
                y[i] -= t;
            }
            y[i] /= self.l[[i, i]];
        }
        y
    }

    /// Inverse of the factored matrix, symmetrized.
    pub fn inverse(&self) -> Array2<F> {
        let n = self.dim();
        let mut inv = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for j in 0..n {
            e[j] = F::one();
            let col = self.solve(&e);
            inv.column_mut(j).assign(&col);
            e[j] = F::zero();
        }
        symmetrize(&mut inv);
        inv
    }

    /// Log-determinant of the factored matrix.
    pub fn ln_det(&self) -> F {
        let mut acc = F::zero();
        for i in 0..self.dim() {
            acc += self.l[[i, i]].ln();
        }
        acc + acc
    }
}

/// Replaces `a` with `(a + a^T) / 2` in place.
pub fn symmetrize<F: Real>(a: &mut Array2<F>) {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    let half = F::of(0.5);
    for i in 0..n {
        for j in 0..i {
            let avg = (a[[i, j]] + a[[j, i]]) * half;
            a[[i, j]] = avg;
            a[[j, i]] = avg;
        }
    }
}

/// Checks symmetry up to `rel_tol` relative to the largest absolute entry.
pub fn is_symmetric<F: Real>(a: &Array2<F>, rel_tol: F) -> bool {
    let n = a.nrows();
    if a.ncols() != n {
        return false;
    }
    let scale = a
        .iter()
        .fold(F::zero(), |m, &v| m.max(v.abs()))
        .max(F::one());
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Largest absolute entry difference between two equally shaped arrays,
/// used as the convergence metric on natural parameters.
pub fn max_abs_diff<F: Real>(a: &Array2<F>, b: &Array2<F>) -> F {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .fold(F::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn factors_known_matrix() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let ch = Cholesky::decompose(&a).unwrap();
        assert_abs_diff_eq!(ch.l[[0, 0]], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ch.l[[1, 0]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ch.l[[1, 1]], 2.0f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(ch.ln_det(), 8.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn solve_and_inverse_agree() {
        let a = array![[2.0, 0.5, 0.1], [0.5, 1.5, 0.2], [0.1, 0.2, 1.0]];
        let ch = Cholesky::decompose(&a).unwrap();
        let b = array![1.0, -2.0, 0.5];
        let x = ch.solve(&b);
        let back = a.dot(&x);
        for i in 0..3 {
            assert_abs_diff_eq!(back[i], b[i], epsilon = 1e-12);
        }
        let inv = ch.inverse();
        let prod = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod[[i, j]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indefinite_and_invalid_input() {
        assert!(Cholesky::decompose(&array![[1.0, 2.0], [2.0, 1.0]]).is_none());
        assert!(Cholesky::decompose(&array![[0.0]]).is_none());
        assert!(Cholesky::decompose(&array![[-1.0]]).is_none());
        assert!(Cholesky::decompose(&array![[f64::NAN]]).is_none());
        assert!(Cholesky::decompose(&Array2::<f64>::zeros((2, 3))).is_none());
    }

    #[test]
    fn one_by_one() {
        let ch = Cholesky::decompose(&array![[4.0]]).unwrap();
        assert_abs_diff_eq!(ch.solve(&array![2.0])[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ch.ln_det(), 4.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn symmetry_helpers() {
        let mut a = array![[1.0, 2.0], [2.0 + 1e-14, 3.0]];
        assert!(is_symmetric(&a, 1e-12));
        assert!(!is_symmetric(&a, 1e-16));
        symmetrize(&mut a);
        assert_eq!(a[[0, 1]], a[[1, 0]]);
        assert_eq!(max_abs_diff(&a, &a), 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let a = array![[4.0f32, 2.0], [2.0, 3.0]];
        let ch = Cholesky::decompose(&a).unwrap();
        let x = ch.solve(&array![2.0f32, 5.0]);
        let back = a.dot(&x);
        assert_abs_diff_eq!(back[0], 2.0f32, epsilon = 1e-5);
        assert_abs_diff_eq!(back[1], 5.0f32, epsilon = 1e-5);
    }
}
