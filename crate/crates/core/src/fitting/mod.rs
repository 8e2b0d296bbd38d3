//! Estimating surrogate parameters from `(sequence, score)` samples.
//!
//! Sample pools are built around one explained sequence and fitted over its
//! unique tokens. [`eff`] fits by minibatch SGD on short random sequences,
//! [`fidel`] by alternating least squares on deletion perturbations, and
//! [`linear`] is the additive baseline.

pub mod eff;
pub mod fidel;
pub mod linear;

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model;
use crate::oracle::Oracle;
use crate::params::SlalomParams;
use crate::scalar::Scalar;
use crate::vocab::{unique_tokens, TokenId, TokenSeq};

pub use eff::{fit_eff, EffHyper, EffReport};
pub use fidel::{fit_fidel, FidelHyper, FidelReport};
pub use linear::{fit_linear_surrogate, LinearSurrogate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Uniform random short sequences over the explained tokens.
    EffRandom,
    /// Random deletions from the explained sequence.
    FidelDeletion,
    /// Supplied by the caller.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool<T: Scalar = f64> {
    pub records: Vec<(TokenSeq, T)>,
    pub provenance: Provenance,
    /// Feature tokens, in order of first occurrence in the explained sequence.
    pub tokens: Vec<TokenId>,
}

impl<T: Scalar> SamplePool<T> {
    /// Pool from caller-supplied records; features are all tokens seen in them.
    pub fn from_records(records: Vec<(TokenSeq, T)>) -> Result<Self> {
        let all: Vec<TokenId> = records
            .iter()
            .flat_map(|(s, _)| s.iter().copied())
            .collect();
        let mut tokens = unique_tokens(&all);
        tokens.sort_unstable();
        let pool = Self {
            records,
            provenance: Provenance::External,
            tokens,
        };
        pool.check()?;
        Ok(pool)
    }

    /// Pool over a fixed global feature set `0..vocab_size`.
    pub fn with_vocabulary(records: Vec<(TokenSeq, T)>, vocab_size: usize) -> Result<Self> {
        let pool = Self {
            records,
            provenance: Provenance::External,
            tokens: (0..vocab_size).collect(),
        };
        pool.check()?;
        Ok(pool)
    }

    pub fn check(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidParams("empty sample pool".into()));
        }
        let index = self.index();
        for (seq, y) in &self.records {
            if seq.is_empty() {
                return Err(Error::EmptySequence);
            }
            if !y.is_finite() {
                return Err(Error::InvalidParams("non-finite score in pool".into()));
            }
            if let Some(&id) = seq.iter().find(|t| !index.contains_key(t)) {
                return Err(Error::OutOfVocab {
                    id,
                    size: self.tokens.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn index(&self) -> HashMap<TokenId, usize> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i))
            .collect()
    }

    /// Each record as sparse `(feature, count)` pairs.
    pub(crate) fn design(&self) -> Design<T> {
        let index = self.index();
        let rows = self
            .records
            .iter()
            .map(|(seq, _)| {
                let mut counts: Vec<(usize, T)> = Vec::new();
                for t in seq.iter() {
                    let j = index[t];
                    match counts.iter_mut().find(|(k, _)| *k == j) {
                        Some((_, c)) => *c = *c + T::one(),
                        None => counts.push((j, T::one())),
                    }
                }
                counts
            })
            .collect();
        Design {
            rows,
            y: self.records.iter().map(|(_, y)| *y).collect(),
            m: self.tokens.len(),
        }
    }
}

pub(crate) struct Design<T> {
    pub rows: Vec<Vec<(usize, T)>>,
    pub y: Vec<T>,
    pub m: usize,
}

impl<T: Scalar> Design<T> {
    /// Per-row attention over features `(feature, weight)` and the model output.
    pub fn attention_row(&self, i: usize, s: &[T], v: &[T]) -> (Vec<(usize, T)>, T) {
        let c = T::lit(model::S_CLAMP);
        let row = &self.rows[i];
        let max = row
            .iter()
            .map(|&(j, _)| s[j].max(-c).min(c))
            .fold(T::neg_infinity(), T::max);
        let mut den = T::zero();
        let mut w: Vec<(usize, T)> = row
            .iter()
            .map(|&(j, cnt)| {
                let e = cnt * (s[j].max(-c).min(c) - max).exp();
                den = den + e;
                (j, e)
            })
            .collect();
        let mut f = T::zero();
        for (j, a) in &mut w {
            *a = *a / den;
            f = f + *a * v[*j];
        }
        (w, f)
    }

    /// Sum of squared residuals.
    pub fn objective(&self, s: &[T], v: &[T]) -> T {
        (0..self.rows.len())
            .map(|i| {
                let (_, f) = self.attention_row(i, s, v);
                let r = f - self.y[i];
                r * r
            })
            .sum()
    }
}

/// A surrogate fitted over a subset of token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSlalom<T: Scalar = f64> {
    pub tokens: Vec<TokenId>,
    /// Indexed like `tokens`.
    pub params: SlalomParams<T>,
}

impl<T: Scalar> FittedSlalom<T> {
    pub fn new(tokens: Vec<TokenId>, params: SlalomParams<T>) -> Result<Self> {
        params.check()?;
        if tokens.len() != params.vocab_size() {
            return Err(Error::LengthMismatch {
                left: tokens.len(),
                right: params.vocab_size(),
            });
        }
        Ok(Self { tokens, params })
    }

    /// Identity token map over `0..|V|`.
    pub fn global(params: SlalomParams<T>) -> Self {
        Self {
            tokens: (0..params.vocab_size()).collect(),
            params,
        }
    }

    pub fn local_seq(&self, seq: &[TokenId]) -> Result<Vec<usize>> {
        seq.iter()
            .map(|t| {
                self.tokens
                    .iter()
                    .position(|x| x == t)
                    .ok_or(Error::OutOfVocab {
                        id: *t,
                        size: self.tokens.len(),
                    })
            })
            .collect()
    }

    pub fn eval(&self, seq: &[TokenId]) -> Result<T> {
        model::eval(&self.params, &self.local_seq(seq)?)
    }

    pub fn value(&self, token: TokenId) -> Option<T> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| self.params.v[i])
    }

    pub fn importance(&self, token: TokenId) -> Option<T> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| self.params.s[i])
    }

    /// Scatters the local parameters into a full vocabulary; absent tokens get `s = v = 0`.
    pub fn to_global(&self, vocab_size: usize) -> Result<SlalomParams<T>> {
        let mut s = vec![T::zero(); vocab_size];
        let mut v = vec![T::zero(); vocab_size];
        for (i, &t) in self.tokens.iter().enumerate() {
            if t >= vocab_size {
                return Err(Error::OutOfVocab {
                    id: t,
                    size: vocab_size,
                });
            }
            s[t] = self.params.s[i];
            v[t] = self.params.v[i];
        }
        Ok(SlalomParams {
            s,
            v,
            gamma: self.params.gamma,
        })
    }

    /// Mean squared error against the scores of `pool`.
    pub fn mse(&self, pool: &SamplePool<T>) -> Result<T> {
        let mut acc = T::zero();
        for (seq, y) in &pool.records {
            let r = self.eval(seq)? - *y;
            acc = acc + r * r;
        }
        Ok(acc / T::from_count(pool.len()))
    }
}

impl<T: Scalar> Oracle<T> for FittedSlalom<T> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        self.eval(seq)
    }
    fn empty_score(&self) -> Option<T> {
        Some(T::zero())
    }
}

fn score_pool<T: Scalar, O: Oracle<T> + ?Sized>(
    oracle: &O,
    seqs: Vec<TokenSeq>,
) -> Result<Vec<(TokenSeq, T)>> {
    let scores = oracle.score_batch(&seqs)?;
    if scores.len() != seqs.len() {
        return Err(Error::Protocol(format!(
            "{} scores for {} sequences",
            scores.len(),
            seqs.len()
        )));
    }
    if scores.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidParams(
            "oracle returned a non-finite score".into(),
        ));
    }
    Ok(seqs.into_iter().zip(scores).collect())
}

/// `b` sequences of `n` tokens drawn uniformly from the unique tokens of `seq`,
/// scored by `oracle`.
pub fn sample_pool_eff<T, O>(
    oracle: &O,
    seq: &[TokenId],
    h: &EffHyper,
    seed: u64,
) -> Result<SamplePool<T>>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    h.check()?;
    let tokens = unique_tokens(seq);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<TokenSeq> = (0..h.pool_size)
        .map(|_| {
            (0..h.seq_len)
                .map(|_| tokens[rng.random_range(0..tokens.len())])
                .collect()
        })
        .collect();
    Ok(SamplePool {
        records: score_pool(oracle, seqs)?,
        provenance: Provenance::EffRandom,
        tokens,
    })
}

/// The explained sequence plus `b - 1` copies with `d ~ U{0..K}` positions
/// deleted uniformly without replacement, scored by `oracle`.
pub fn sample_pool_fidel<T, O>(
    oracle: &O,
    seq: &[TokenId],
    h: &FidelHyper,
    seed: u64,
) -> Result<SamplePool<T>>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    let tokens = unique_tokens(seq);
    if seq.len() <= h.max_deletions {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            need: h.max_deletions,
        });
    }
    if h.pool_size < tokens.len() {
        return Err(Error::InvalidParams(format!(
            "pool size {} below the {} unique tokens",
            h.pool_size,
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(h.pool_size);
    seqs.push(TokenSeq::from(seq.to_vec()));
    while seqs.len() < h.pool_size {
        seqs.push(delete_random(
            seq,
            rng.random_range(0..=h.max_deletions),
            &mut rng,
        ));
    }
    Ok(SamplePool {
        records: score_pool(oracle, seqs)?,
        provenance: Provenance::FidelDeletion,
        tokens,
    })
}

/// Copy of `seq` with `d` distinct positions removed.
pub fn delete_random<R: Rng + ?Sized>(seq: &[TokenId], d: usize, rng: &mut R) -> TokenSeq {
    let mut drop = vec![false; seq.len()];
    for i in index::sample(rng, seq.len(), d.min(seq.len())) {
        drop[i] = true;
    }
    seq.iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(&t, _)| t)
        .collect()
}
