//! The query surface every explainer talks to, built-in reference oracles, and
//! the newline-delimited JSON wire protocol for external models.

mod external;
pub mod protocol;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use external::{Endpoint, ExternalOptions, ExternalOracle};

use crate::error::{Error, Result};
use crate::model;
use crate::params::SlalomParams;
use crate::scalar::{logit, Scalar};
use crate::vocab::{validate_sequence, TokenId, TokenSeq};

/// A black-box map from token sequences to two-class log odds.
pub trait Oracle<T: Scalar = f64>: Send + Sync {
    fn score(&self, seq: &[TokenId]) -> Result<T>;

    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<T>> {
        seqs.iter().map(|s| self.score(s)).collect()
    }

    /// Output on the empty sequence, when the oracle defines one.
    fn empty_score(&self) -> Option<T> {
        None
    }

    fn vocab_size(&self) -> Option<usize> {
        None
    }
}

impl<T: Scalar, O: Oracle<T> + ?Sized> Oracle<T> for &O {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        (**self).score(seq)
    }
    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<T>> {
        (**self).score_batch(seqs)
    }
    fn empty_score(&self) -> Option<T> {
        (**self).empty_score()
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
}

impl<T: Scalar, O: Oracle<T> + ?Sized> Oracle<T> for Box<O> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        (**self).score(seq)
    }
    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<T>> {
        (**self).score_batch(seqs)
    }
    fn empty_score(&self) -> Option<T> {
        (**self).empty_score()
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
}

impl<T: Scalar, O: Oracle<T> + ?Sized> Oracle<T> for Arc<O> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        (**self).score(seq)
    }
    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<T>> {
        (**self).score_batch(seqs)
    }
    fn empty_score(&self) -> Option<T> {
        (**self).empty_score()
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
}

/// Analytic SLALOM; the empty sequence scores 0.
#[derive(Debug, Clone)]
pub struct SlalomOracle<T: Scalar = f64>(pub SlalomParams<T>);

impl<T: Scalar> Oracle<T> for SlalomOracle<T> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        model::eval(&self.0, seq)
    }
    fn empty_score(&self) -> Option<T> {
        Some(T::zero())
    }
    fn vocab_size(&self) -> Option<usize> {
        Some(self.0.vocab_size())
    }
}

/// Weights and offset of the additive model `b + sum_i w(t_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LinearModelParams<T: Scalar = f64> {
    pub w: Vec<T>,
    #[serde(default)]
    pub b: T,
}

impl<T: Scalar> LinearModelParams<T> {
    pub fn new(w: Vec<T>, b: T) -> Result<Self> {
        if !b.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite linear weight".into()));
        }
        Ok(Self { w, b })
    }

    /// All-zero weights over `vocab_size` tokens.
    pub fn constant(vocab_size: usize, b: T) -> Self {
        Self {
            w: vec![T::zero(); vocab_size],
            b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearOracle<T: Scalar = f64>(pub LinearModelParams<T>);

pub fn make_linear_oracle<T: Scalar>(p: LinearModelParams<T>) -> LinearOracle<T> {
    LinearOracle(p)
}

impl<T: Scalar> Oracle<T> for LinearOracle<T> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        validate_sequence(self.0.w.len(), seq, usize::MAX)?;
        Ok(seq.iter().fold(self.0.b, |acc, &t| acc + self.0.w[t]))
    }
    fn empty_score(&self) -> Option<T> {
        Some(self.0.b)
    }
    fn vocab_size(&self) -> Option<usize> {
        Some(self.0.w.len())
    }
}

/// Naive-Bayes token scores `log((c1 + alpha) / (c0 + alpha))` from class-wise
/// occurrence counts, with offset `log_prior_ratio`.
pub fn naive_bayes_from_counts<T: Scalar>(
    class1_counts: &[T],
    class0_counts: &[T],
    alpha: T,
    log_prior_ratio: T,
) -> Result<LinearModelParams<T>> {
    if class1_counts.len() != class0_counts.len() {
        return Err(Error::LengthMismatch {
            left: class1_counts.len(),
            right: class0_counts.len(),
        });
    }
    if !(alpha > T::zero()) {
        return Err(Error::InvalidParams("smoothing must be positive".into()));
    }
    if class1_counts
        .iter()
        .chain(class0_counts)
        .any(|&c| !(c >= T::zero()))
    {
        return Err(Error::InvalidParams("counts must be non-negative".into()));
    }
    let w = class1_counts
        .iter()
        .zip(class0_counts)
        .map(|(&c1, &c0)| ((c1 + alpha) / (c0 + alpha)).ln())
        .collect();
    LinearModelParams::new(w, log_prior_ratio)
}

/// Wraps a closure. Mostly useful for tests and constant baselines.
pub struct FnOracle<F>(pub F);

impl<T: Scalar, F> Oracle<T> for FnOracle<F>
where
    F: Fn(&[TokenId]) -> Result<T> + Send + Sync,
{
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        (self.0)(seq)
    }
}

/// Converts an oracle that emits class-1 probabilities to log odds.
pub struct ProbabilityOracle<O>(pub O);

impl<T: Scalar, O: Oracle<T>> Oracle<T> for ProbabilityOracle<O> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        self.0.score(seq).map(logit)
    }
    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<T>> {
        Ok(self.0.score_batch(seqs)?.into_iter().map(logit).collect())
    }
    fn vocab_size(&self) -> Option<usize> {
        self.0.vocab_size()
    }
}

/// Counts the sequences scored through it.
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicU64,
}

impl<O> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn query_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<T: Scalar, O: Oracle<T>> Oracle<T> for CountingOracle<O> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(seq)
    }
    fn score_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<T>> {
        self.calls.fetch_add(seqs.len() as u64, Ordering::SeqCst);
        self.inner.score_batch(seqs)
    }
    fn empty_score(&self) -> Option<T> {
        self.inner.empty_score()
    }
    fn vocab_size(&self) -> Option<usize> {
        self.inner.vocab_size()
    }
}
