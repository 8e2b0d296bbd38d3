//! Small dense kernels for the normal equations of the fitting routines.

use crate::scalar::Scalar;

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Square<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Square<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.n + j]
    }

    pub fn add_diag(&mut self, x: T) {
        for i in 0..self.n {
            *self.at_mut(i, i) = self.at(i, i) + x;
        }
    }

    pub fn max_diag(&self) -> T {
        (0..self.n)
            .map(|i| self.at(i, i).abs())
            .fold(T::zero(), T::max)
    }

    /// Adds `w * x x^T`.
    pub fn rank_one(&mut self, x: &[T], w: T) {
        for i in 0..self.n {
            let xi = w * x[i];
            if xi == T::zero() {
                continue;
            }
            for j in 0..self.n {
                *self.at_mut(i, j) = self.at(i, j) + xi * x[j];
            }
        }
    }

    /// Folds a matrix accumulated as `A + B` with only one of each
    /// off-diagonal pair filled into its symmetric form.
    pub fn symmetrize_halves(&mut self) {
        for i in 0..self.n {
            for j in i + 1..self.n {
                let t = self.at(i, j) + self.at(j, i);
                *self.at_mut(i, j) = t;
                *self.at_mut(j, i) = t;
            }
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.at(i, j) * x[j]).sum())
            .collect()
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix, or `None`
/// when a pivot falls below `rel_tol * max_diag`.
pub(crate) fn cholesky<T: Scalar>(a: &Square<T>, rel_tol: T) -> Option<Square<T>> {
    let n = a.n;
    let floor = rel_tol * a.max_diag().max(T::min_positive_value());
    let mut l = Square::zeros(n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d = d - l.at(j, k) * l.at(j, k);
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        *l.at_mut(j, j) = d;
        for i in j + 1..n {
            let mut x = a.at(i, j);
            for k in 0..j {
                x = x - l.at(i, k) * l.at(j, k);
            }
            *l.at_mut(i, j) = x / d;
        }
    }
    Some(l)
}

pub(crate) fn cholesky_solve<T: Scalar>(l: &Square<T>, b: &[T]) -> Vec<T> {
    let n = l.n;
    let mut y = b.to_vec();
    for i in 0..n {
        let mut x = y[i];
        for k in 0..i {
            x = x - l.at(i, k) * y[k];
        }
        y[i] = x / l.at(i, i);
    }
    for i in (0..n).rev() {
        let mut x = y[i];
        for k in i + 1..n {
            x = x - l.at(k, i) * y[k];
        }
        y[i] = x / l.at(i, i);
    }
    y
}

/// Relative pivot floor below which a Gram matrix counts as rank deficient.
pub(crate) const RANK_TOL: f64 = 1e-12;

/// Ridge added when the Gram matrix is rank deficient.
pub(crate) const RIDGE: f64 = 1e-8;

/// Solves `G x = b` for a Gram matrix `G`. Falls back to `G + ridge I`, scaled
/// by the largest diagonal entry, and reports whether that was needed.
pub(crate) fn solve_gram<T: Scalar>(g: &Square<T>, b: &[T]) -> Option<(Vec<T>, bool)> {
    if let Some(l) = cholesky(g, T::lit(RANK_TOL)) {
        return Some((cholesky_solve(&l, b), false));
    }
    let mut reg = g.clone();
    reg.add_diag(T::lit(RIDGE) * g.max_diag().max(T::one()));
    cholesky(&reg, T::zero()).map(|l| (cholesky_solve(&l, b), true))
}
