//! Evaluation metrics: deletion fidelity, perturbation curves, rank
//! correlation, AU-ROC and parameter recovery error.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::eval;
use crate::oracle::Oracle;
use crate::params::SlalomParams;
use crate::scalar::{sigmoid, Scalar};
use crate::vocab::{TokenId, TokenSeq};

/// Per-k mean squared error between the predicted and actual change in log
/// odds when `k` random positions are removed, for `k = 1..=k_max`.
///
/// The predicted change is `predictor(reduced) - predictor(full)`; for a
/// linear surrogate this is minus the sum of the removed weights.
pub fn fidelity_mse<T, O, P>(
    oracle: &O,
    predictor: &P,
    seq: &[TokenId],
    k_max: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<T>>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
    P: Oracle<T> + ?Sized,
{
    if seq.len() <= k_max {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            need: k_max + 1,
        });
    }
    if trials == 0 {
        return Err(Error::InvalidParams("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full_actual = oracle.score(seq)?;
    let full_pred = predictor.score(seq)?;
    (1..=k_max)
        .map(|k| {
            let reduced: Vec<TokenSeq> = (0..trials)
                .map(|_| {
                    let mut drop = vec![false; seq.len()];
                    for i in index::sample(&mut rng, seq.len(), k) {
                        drop[i] = true;
                    }
                    seq.iter()
                        .zip(&drop)
                        .filter(|(_, &d)| !d)
                        .map(|(&t, _)| t)
                        .collect()
                })
                .collect();
            let actual = oracle.score_batch(&reduced)?;
            let mut acc = T::zero();
            for (r, a) in reduced.iter().zip(actual) {
                let e = (predictor.score(r)? - full_pred) - (a - full_actual);
                acc = acc + e * e;
            }
            Ok(acc / T::from_count(trials))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationMode {
    /// Remove the top-k positions.
    Deletion,
    /// Keep only the top-k positions.
    Insertion,
}

/// What to score when a perturbation leaves no tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyInput {
    /// Use the oracle's own empty score, else drop the point.
    Oracle,
    /// Score `[token]` instead.
    Baseline(TokenId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub ks: Vec<usize>,
    /// Probability of the class predicted on the full sequence.
    pub scores: Vec<f64>,
    /// That probability on the full sequence.
    pub reference: f64,
    /// Mean of `reference - score` over the curve.
    pub aopc: f64,
}

/// Top-first order of positions; ties keep sequence order.
pub fn rank_positions<T: Scalar>(ranking: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ranking.len()).collect();
    order.sort_by(|&a, &b| {
        ranking[b]
            .partial_cmp(&ranking[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

pub fn aopc<T, O>(
    oracle: &O,
    seq: &[TokenId],
    ranking: &[T],
    k_max: usize,
    mode: PerturbationMode,
    empty: EmptyInput,
) -> Result<PerturbationCurve>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if ranking.len() != seq.len() {
        return Err(Error::LengthMismatch {
            left: ranking.len(),
            right: seq.len(),
        });
    }
    if k_max > seq.len() {
        return Err(Error::InvalidParams(format!(
            "K = {k_max} exceeds length {}",
            seq.len()
        )));
    }
    let full = oracle.score(seq)?.as_f64();
    let positive = full >= 0.0;
    let prob = |f: f64| {
        if positive {
            sigmoid(f)
        } else {
            1.0 - sigmoid(f)
        }
    };
    let order = rank_positions(ranking);

    let mut ks = Vec::with_capacity(k_max + 1);
    let mut scores = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut keep = vec![mode == PerturbationMode::Deletion; seq.len()];
        for &i in &order[..k] {
            keep[i] = !keep[i];
        }
        let reduced: Vec<TokenId> = seq
            .iter()
            .zip(&keep)
            .filter(|(_, &kp)| kp)
            .map(|(&t, _)| t)
            .collect();
        let f = if !reduced.is_empty() {
            Some(oracle.score(&reduced)?)
        } else {
            match empty {
                EmptyInput::Oracle => oracle.empty_score(),
                EmptyInput::Baseline(b) => Some(oracle.score(&[b])?),
            }
        };
        if let Some(f) = f {
            ks.push(k);
            scores.push(prob(f.as_f64()));
        }
    }
    let reference = prob(full);
    let aopc = if scores.is_empty() {
        0.0
    } else {
        scores.iter().map(|p| reference - p).sum::<f64>() / scores.len() as f64
    };
    Ok(PerturbationCurve {
        ks,
        scores,
        reference,
        aopc,
    })
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks<T: Scalar>(xs: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman<T: Scalar>(xs: &[T], ys: &[T]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateConstantInput);
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean) * (a - mean);
        vy += (b - mean) * (b - mean);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateConstantInput);
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidParams(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `(param_mse, logit_mse)` after normalizing `fitted` to the γ of `truth`.
pub fn param_recovery_error<T: Scalar>(
    truth: &SlalomParams<T>,
    fitted: &SlalomParams<T>,
    eval_set: &[TokenSeq],
) -> Result<(T, T)> {
    if truth.vocab_size() != fitted.vocab_size() {
        return Err(Error::VocabMismatch {
            left: truth.vocab_size(),
            right: fitted.vocab_size(),
        });
    }
    let a = truth.normalize()?;
    let b = fitted.with_gamma(truth.gamma)?;
    let sq = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>();
    let param = (sq(&a.s, &b.s) + sq(&a.v, &b.v)) / T::from_count(2 * a.vocab_size());
    let mut logit = T::zero();
    for seq in eval_set {
        let d = eval(&a, seq)? - eval(&b, seq)?;
        logit = logit + d * d;
    }
    if !eval_set.is_empty() {
        logit = logit / T::from_count(eval_set.len());
    }
    Ok((param, logit))
}
