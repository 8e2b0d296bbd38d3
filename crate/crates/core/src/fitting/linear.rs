//! Additive baseline: ordinary least squares on token counts with an intercept.

use super::SamplePool;
use crate::error::Result;
use crate::linalg::{solve_gram, Square};
use crate::oracle::Oracle;
use crate::scalar::Scalar;
use crate::vocab::TokenId;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate<T: Scalar = f64> {
    pub tokens: Vec<TokenId>,
    /// Indexed like `tokens`.
    pub weights: Vec<T>,
    pub offset: T,
    /// Set when the normal equations were singular and ridge was applied, or
    /// when the pool is too small for anything beyond an intercept.
    pub rank_deficient: bool,
    /// Mean squared training residual.
    pub residual_mse: T,
}

impl<T: Scalar> LinearSurrogate<T> {
    pub fn weight(&self, token: TokenId) -> Option<T> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| self.weights[i])
    }

    pub fn predict(&self, seq: &[TokenId]) -> Result<T> {
        seq.iter().try_fold(self.offset, |acc, &t| {
            self.weight(t).map(|w| acc + w).ok_or(Error::OutOfVocab {
                id: t,
                size: self.tokens.len(),
            })
        })
    }
}

impl<T: Scalar> Oracle<T> for LinearSurrogate<T> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        self.predict(seq)
    }
    fn empty_score(&self) -> Option<T> {
        Some(self.offset)
    }
}

pub fn fit_linear_surrogate<T: Scalar>(pool: &SamplePool<T>) -> Result<LinearSurrogate<T>> {
    pool.check()?;
    let design = pool.design();
    let m = design.m;
    let n = design.rows.len();

    let (weights, offset, rank_deficient) = if n < 2 {
        (vec![T::zero(); m], design.y[0], true)
    } else {
        // last column is the intercept
        let mut gram = Square::zeros(m + 1);
        let mut rhs = vec![T::zero(); m + 1];
        let mut x = vec![T::zero(); m + 1];
        for (row, &y) in design.rows.iter().zip(&design.y) {
            x.iter_mut().for_each(|e| *e = T::zero());
            for &(j, c) in row {
                x[j] = c;
            }
            x[m] = T::one();
            gram.rank_one(&x, T::one());
            for j in 0..=m {
                rhs[j] = rhs[j] + x[j] * y;
            }
        }
        let (beta, ridge) = solve_gram(&gram, &rhs)
            .ok_or_else(|| Error::InvalidParams("linear surrogate system unsolvable".into()))?;
        (beta[..m].to_vec(), beta[m], ridge)
    };

    let mut sse = T::zero();
    for (row, &y) in design.rows.iter().zip(&design.y) {
        let pred = row.iter().fold(offset, |acc, &(j, c)| acc + c * weights[j]);
        sse = sse + (pred - y) * (pred - y);
    }
    Ok(LinearSurrogate {
        tokens: pool.tokens.clone(),
        weights,
        offset,
        rank_deficient,
        residual_mse: sse / T::from_count(n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::{sample_pool_fidel, FidelHyper};
    use crate::oracle::{LinearModelParams, LinearOracle, SlalomOracle};
    use crate::params::SlalomParams;
    use crate::vocab::TokenSeq;

    #[test]
    fn recovers_a_linear_model() {
        let truth = LinearModelParams::new(vec![0.6f64, -1.0, 1.5, 0.0, 0.25], 0.3).unwrap();
        let seq = [0, 1, 2, 3, 4, 0, 2, 1, 4, 3, 2, 2];
        let h = FidelHyper {
            pool_size: 300,
            ..FidelHyper::default()
        };
        let pool = sample_pool_fidel(&LinearOracle(truth.clone()), &seq, &h, 1).unwrap();
        let fit = fit_linear_surrogate(&pool).unwrap();
        assert!(!fit.rank_deficient);
        for t in 0..5 {
            assert!((fit.weight(t).unwrap() - truth.w[t]).abs() < 1e-9);
        }
        assert!((fit.offset - 0.3).abs() < 1e-9);
        assert!(fit.residual_mse < 1e-18);
    }

    #[test]
    fn slalom_data_leaves_a_residual() {
        let p =
            SlalomParams::new(vec![2.0, -1.0, 0.0, 1.0], vec![1.0, -1.0, 0.5, -0.3], 0.0).unwrap();
        let seq = [0, 1, 2, 3, 1, 2, 3, 0, 2];
        let h = FidelHyper {
            pool_size: 300,
            ..FidelHyper::default()
        };
        let pool = sample_pool_fidel(&SlalomOracle(p), &seq, &h, 2).unwrap();
        let fit = fit_linear_surrogate(&pool).unwrap();
        assert!(fit.residual_mse > 1e-6, "{}", fit.residual_mse);
    }

    #[test]
    fn single_record_is_intercept_only() {
        let pool = SamplePool::from_records(vec![(TokenSeq::from(vec![0, 1]), 0.7)]).unwrap();
        let fit = fit_linear_surrogate(&pool).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.weights, vec![0.0, 0.0]);
        assert_eq!(fit.offset, 0.7);
    }
}
