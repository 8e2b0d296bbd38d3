//! Exact identification of SLALOM parameters from `2|V| - 1` oracle queries.
//!
//! Values come from single-token queries, `v(t) = F([t])`. For a pair with
//! distinct values, `g = (F([t, r]) - v(r)) / (v(t) - v(r))` is the attention
//! on `t`, so `s(t) - s(r) = ln g - ln(1 - g)`. All gaps are chained to one
//! reference token and then shifted so the importances sum to `gamma`.

use crate::error::{Error, Result};
use crate::oracle::{CountingOracle, Oracle};
use crate::params::SlalomParams;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, TokenSeq};

/// Largest importance gap reported; larger gaps are clamped and flagged.
pub const MAX_GAP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport<T: Scalar = f64> {
    pub params: SlalomParams<T>,
    pub query_count: u64,
    pub reference_token: TokenId,
    pub secondary_reference: TokenId,
    /// Tokens whose gap hit [`MAX_GAP`].
    pub saturated: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap<T> {
    /// `s(t) - s(r)`
    pub value: T,
    pub saturated: bool,
}

/// Tie tolerance on single-token values: `1e-7 * max(1, max |v|)`.
pub fn tie_tolerance<T: Scalar>(values: &[T]) -> T {
    let scale = values.iter().fold(T::one(), |m, v| m.max(v.abs()));
    T::lit(1e-7) * scale
}

/// Importance gap `s(t) - s(r)` from `F([t])`, `F([r])` and `F([t, r])`.
pub fn pairwise_importance_gap<T: Scalar>(f_tau: T, f_hat: T, f_pair: T, eps: T) -> Result<Gap<T>> {
    let den = f_tau - f_hat;
    if !(den.abs() >= eps) {
        return Err(Error::DegenerateValues);
    }
    let g = (f_pair - f_hat) / den;
    let slack = T::lit(1e-9);
    if !(g > -slack && g < T::one() + slack) {
        return Err(Error::OutOfRange(g.as_f64()));
    }
    let limit = T::lit(MAX_GAP);
    let raw = g.ln() - (T::one() - g).ln();
    if raw.is_nan() {
        return Err(Error::OutOfRange(g.as_f64()));
    }
    if raw.abs() > limit {
        return Ok(Gap {
            value: raw.signum() * limit,
            saturated: true,
        });
    }
    Ok(Gap {
        value: raw,
        saturated: false,
    })
}

/// Recovers `(s, v)` of a SLALOM oracle over token ids `0..vocab_size`.
pub fn recover<T, O>(oracle: &O, vocab_size: usize, gamma: T) -> Result<RecoveryReport<T>>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    recover_with_reference(oracle, vocab_size, gamma, 0)
}

/// [`recover`] with an explicit choice of the reference token.
pub fn recover_with_reference<T, O>(
    oracle: &O,
    vocab_size: usize,
    gamma: T,
    reference: TokenId,
) -> Result<RecoveryReport<T>>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    if vocab_size < 2 {
        return Err(Error::ConstantModel);
    }
    if reference >= vocab_size {
        return Err(Error::OutOfVocab {
            id: reference,
            size: vocab_size,
        });
    }
    let counted = CountingOracle::new(oracle);

    let singles: Vec<TokenSeq> = (0..vocab_size).map(|t| TokenSeq::from(vec![t])).collect();
    let v = counted.score_batch(&singles)?;
    let eps = tie_tolerance(&v);

    let theta = reference;
    // the token furthest in value from the reference gives the best-conditioned pair
    let (theta_hat, spread) = v
        .iter()
        .enumerate()
        .map(|(t, &x)| (t, (x - v[theta]).abs()))
        .fold(
            (theta, T::zero()),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    if !(spread >= eps) {
        return Err(Error::ConstantModel);
    }

    let mut pairs = Vec::with_capacity(vocab_size - 1);
    let mut partner = vec![theta; vocab_size];
    for tau in
        std::iter::once(theta_hat).chain((0..vocab_size).filter(|&t| t != theta && t != theta_hat))
    {
        let hat = if (v[tau] - v[theta]).abs() >= eps {
            theta
        } else if (v[tau] - v[theta_hat]).abs() >= eps {
            theta_hat
        } else {
            return Err(Error::NearDegenerate(tau));
        };
        partner[tau] = hat;
        pairs.push(tau);
    }
    let pair_seqs: Vec<TokenSeq> = pairs
        .iter()
        .map(|&t| TokenSeq::from(vec![t, partner[t]]))
        .collect();
    let pair_scores = counted.score_batch(&pair_seqs)?;

    let mut eta = vec![T::zero(); vocab_size];
    let mut saturated = Vec::new();
    for (&tau, &f_pair) in pairs.iter().zip(&pair_scores) {
        let hat = partner[tau];
        let gap = pairwise_importance_gap(v[tau], v[hat], f_pair, eps)?;
        if gap.saturated {
            saturated.push(tau);
        }
        // theta_hat is resolved first, so its offset is known when chained through
        eta[tau] = if hat == theta {
            gap.value
        } else {
            gap.value + eta[theta_hat]
        };
    }

    let n = T::from_count(vocab_size);
    let s_theta = (gamma - eta.iter().copied().sum::<T>()) / n;
    let s = eta.iter().map(|&e| s_theta + e).collect();
    Ok(RecoveryReport {
        params: SlalomParams::new(s, v, gamma)?,
        query_count: counted.query_count(),
        reference_token: theta,
        secondary_reference: theta_hat,
        saturated,
    })
}

/// Largest absolute gap between the oracle and `params` on `probes`.
pub fn max_residual<T, O>(oracle: &O, params: &SlalomParams<T>, probes: &[TokenSeq]) -> Result<T>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    let scores = oracle.score_batch(probes)?;
    probes
        .iter()
        .zip(scores)
        .try_fold(T::zero(), |m, (seq, y)| {
            Ok(m.max((crate::model::eval(params, seq)? - y).abs()))
        })
}
