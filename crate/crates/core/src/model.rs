//! Evaluation of the softmax-linked additive log odds model and the
//! attributions derived from it.
//!
//! For a sequence `t`, the log odds are `F(t) = sum_i a_i v(t_i)` with
//! attention `a_i = exp(s(t_i)) / sum_j exp(s(t_j))`. Importances are clamped
//! to `[-S_CLAMP, S_CLAMP]` before exponentiation and the softmax is computed
//! with the running maximum subtracted.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{MultiClassSlalomParams, SlalomParams};
use crate::scalar::{softmax, Scalar};
use crate::vocab::TokenId;

/// Importances beyond this magnitude are saturated.
pub const S_CLAMP: f64 = 50.0;

/// Longest sequence accepted by [`shapley_exact`].
pub const MAX_EXACT_SHAPLEY: usize = 20;

/// One score per sequence position.
pub type Attribution<T> = Vec<T>;

#[inline]
fn clamp_s<T: Scalar>(s: T) -> T {
    let c = T::lit(S_CLAMP);
    s.max(-c).min(c)
}

fn lookup<T: Scalar>(p: &SlalomParams<T>, seq: &[TokenId]) -> Result<Vec<(T, T)>> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    seq.iter()
        .map(|&id| match (p.s.get(id), p.v.get(id)) {
            (Some(&s), Some(&v)) => Ok((clamp_s(s), v)),
            _ => Err(Error::OutOfVocab {
                id,
                size: p.vocab_size(),
            }),
        })
        .collect()
}

/// Unnormalized softmax terms `exp(s_i - max)` for the given importances.
fn exp_terms<T: Scalar>(s: impl Iterator<Item = T> + Clone) -> Vec<T> {
    let max = s.clone().fold(T::neg_infinity(), T::max);
    s.map(|x| (x - max).exp()).collect()
}

pub fn attention_weights<T: Scalar>(p: &SlalomParams<T>, seq: &[TokenId]) -> Result<Vec<T>> {
    let sv = lookup(p, seq)?;
    let e = exp_terms(sv.iter().map(|&(s, _)| s));
    let z: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Log odds of `seq`. Empty sequences are rejected.
pub fn eval<T: Scalar>(p: &SlalomParams<T>, seq: &[TokenId]) -> Result<T> {
    let sv = lookup(p, seq)?;
    let e = exp_terms(sv.iter().map(|&(s, _)| s));
    let (mut num, mut den) = (T::zero(), T::zero());
    for (&ei, &(_, v)) in e.iter().zip(&sv) {
        num = num + ei * v;
        den = den + ei;
    }
    Ok(num / den)
}

/// Soft presence of each position, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceWeights<T: Scalar = f64>(Vec<T>);

impl<T: Scalar> PresenceWeights<T> {
    pub fn new(lambda: Vec<T>) -> Result<Self> {
        if lambda.iter().any(|&l| !(l >= T::zero() && l <= T::one())) {
            return Err(Error::InvalidParams(
                "presence weights must lie in [0, 1]".into(),
            ));
        }
        if !lambda.iter().any(|&l| l > T::zero()) {
            return Err(Error::AllMasked);
        }
        Ok(Self(lambda))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![T::one(); n])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

/// Soft-removal model `sum_i l_i e^{s_i} v_i / sum_i l_i e^{s_i}`.
///
/// With binary weights this is bit-identical to [`eval`] on the kept positions.
pub fn eval_weighted<T: Scalar>(
    p: &SlalomParams<T>,
    seq: &[TokenId],
    lambda: &PresenceWeights<T>,
) -> Result<T> {
    let lambda = lambda.as_slice();
    if lambda.len() != seq.len() {
        return Err(Error::LengthMismatch {
            left: seq.len(),
            right: lambda.len(),
        });
    }
    let sv = lookup(p, seq)?;
    let max = sv
        .iter()
        .zip(lambda)
        .filter(|(_, &l)| l > T::zero())
        .map(|(&(s, _), _)| s)
        .fold(T::neg_infinity(), T::max);
    let (mut num, mut den) = (T::zero(), T::zero());
    for (&(s, v), &l) in sv.iter().zip(lambda) {
        if l > T::zero() {
            let w = l * (s - max).exp();
            num = num + w * v;
            den = den + w;
        }
    }
    if !(den > T::zero()) {
        return Err(Error::AllMasked);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Linearization {
    /// `v(t_i) * exp(s(t_i))`, proportional to the soft-removal gradient up
    /// to a shared positive factor when values are offset by `F`.
    #[default]
    Proportional,
    /// The exact gradient `a_i (v(t_i) - F(t))` of the soft-removal model at all-ones.
    ExactGradient,
}

pub fn linearized_scores<T: Scalar>(
    p: &SlalomParams<T>,
    seq: &[TokenId],
    mode: Linearization,
) -> Result<Attribution<T>> {
    match mode {
        Linearization::Proportional => Ok(lookup(p, seq)?
            .into_iter()
            .map(|(s, v)| v * s.exp())
            .collect()),
        Linearization::ExactGradient => {
            let alpha = attention_weights(p, seq)?;
            let f = eval(p, seq)?;
            Ok(alpha
                .into_iter()
                .zip(seq)
                .map(|(a, &id)| a * (p.v[id] - f))
                .collect())
        }
    }
}

/// Exact Shapley values over sequence positions with the empty coalition
/// scored as 0 log odds.
pub fn shapley_exact<T: Scalar>(p: &SlalomParams<T>, seq: &[TokenId]) -> Result<Attribution<T>> {
    let n = seq.len();
    if n > MAX_EXACT_SHAPLEY {
        return Err(Error::TooLongForExact {
            len: n,
            max: MAX_EXACT_SHAPLEY,
        });
    }
    let sv = lookup(p, seq)?;
    let e = exp_terms(sv.iter().map(|&(s, _)| s));
    let ev: Vec<T> = e.iter().zip(&sv).map(|(&ei, &(_, v))| ei * v).collect();

    let size = 1usize << n;
    let mut num = vec![T::zero(); size];
    let mut den = vec![T::zero(); size];
    let mut f = vec![T::zero(); size];
    for mask in 1..size {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        num[mask] = num[rest] + ev[low];
        den[mask] = den[rest] + e[low];
        f[mask] = num[mask] / den[mask];
    }

    // |S|! (n - |S| - 1)! / n!
    let mut weight = vec![T::zero(); n];
    for (k, w) in weight.iter_mut().enumerate() {
        let mut x = 1.0f64 / n as f64;
        // 1 / (n * C(n-1, k))
        for j in 0..k {
            x *= (j + 1) as f64 / (n - 1 - j) as f64;
        }
        *w = T::lit(x);
    }

    let mut phi = vec![T::zero(); n];
    for mask in 0..size {
        let k = mask.count_ones() as usize;
        if k == n {
            continue;
        }
        for (i, ph) in phi.iter_mut().enumerate() {
            if mask & (1 << i) == 0 {
                *ph = *ph + weight[k] * (f[mask | (1 << i)] - f[mask]);
            }
        }
    }
    Ok(phi)
}

/// Monte-Carlo Shapley estimate from `m` uniformly random permutations.
///
/// Each permutation's marginal contributions telescope to `F(t) - 0`, so the
/// estimate satisfies efficiency up to rounding.
pub fn shapley_sampled<T: Scalar>(
    p: &SlalomParams<T>,
    seq: &[TokenId],
    m: usize,
    seed: u64,
) -> Result<Attribution<T>> {
    if m == 0 {
        return Err(Error::InvalidParams("need at least one permutation".into()));
    }
    let sv = lookup(p, seq)?;
    let e = exp_terms(sv.iter().map(|&(s, _)| s));
    let n = seq.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut acc = vec![0.0f64; n];
    for _ in 0..m {
        order.shuffle(&mut rng);
        let (mut num, mut den, mut prev) = (T::zero(), T::zero(), T::zero());
        for &i in &order {
            num = num + e[i] * sv[i].1;
            den = den + e[i];
            let cur = num / den;
            acc[i] += (cur - prev).as_f64();
            prev = cur;
        }
    }
    Ok(acc.into_iter().map(|x| T::lit(x / m as f64)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiClassOutput<T: Scalar = f64> {
    /// Per-class scores `F_c`.
    pub scores: Vec<T>,
    /// `softmax(scores)`
    pub posterior: Vec<T>,
}

pub fn eval_multiclass<T: Scalar>(
    p: &MultiClassSlalomParams<T>,
    seq: &[TokenId],
) -> Result<MultiClassOutput<T>> {
    p.check()?;
    let shared = SlalomParams {
        s: p.s.clone(),
        v: vec![T::zero(); p.vocab_size()],
        gamma: p.gamma,
    };
    let alpha = attention_weights(&shared, seq)?;
    let scores: Vec<T> =
        p.v.iter()
            .map(|row| alpha.iter().zip(seq).map(|(&a, &id)| a * row[id]).sum())
            .collect();
    let posterior = softmax(&scores);
    Ok(MultiClassOutput { scores, posterior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = 0;
    const B: TokenId = 1;

    fn two_token() -> SlalomParams {
        SlalomParams::new(vec![0.5, -0.5], vec![1.0, -1.0], 0.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn attention_examples() {
        let flat = SlalomParams::new(vec![0.0, 0.0], vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(attention_weights(&flat, &[A, B]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(attention_weights(&two_token(), &[B]).unwrap(), vec![1.0]);
        let w = attention_weights(&two_token(), &[A, B]).unwrap();
        assert!(close(w[0], 0.731_058_578_630_004_9, 1e-12));
        assert!(close(w[1], 0.268_941_421_369_995_1, 1e-12));
        assert!(matches!(
            attention_weights(&two_token(), &[]),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn eval_examples() {
        let p = two_token();
        assert_eq!(eval(&p, &[A]).unwrap(), 1.0);
        assert_eq!(eval(&p, &[B]).unwrap(), -1.0);
        assert!(close(eval(&p, &[A, B]).unwrap(), 0.5f64.tanh(), 1e-12));
        assert!(close(eval(&p, &[A, B]).unwrap(), 0.46212, 1e-5));
        let e5 = 0.5f64.exp();
        let want = (2.0 * e5 - 1.0 / e5) / (2.0 * e5 + 1.0 / e5);
        assert!(close(eval(&p, &[A, A, B]).unwrap(), want, 1e-12));
        assert!(close(want, 0.68927, 1e-5));
        assert!(matches!(
            eval(&p, &[7]),
            Err(Error::OutOfVocab { id: 7, size: 2 })
        ));
    }

    #[test]
    fn clamped_importances_do_not_overflow() {
        let p = SlalomParams::new(vec![1e6f64, -1e6], vec![2.0, -3.0], 0.0).unwrap();
        let f = eval(&p, &[A, B, B]).unwrap();
        assert!(f.is_finite());
        assert!(close(f, 2.0, 1e-12));
    }

    #[test]
    fn weighted_examples() {
        let p = two_token();
        let ones = PresenceWeights::ones(2);
        assert_eq!(
            eval_weighted(&p, &[A, B], &ones).unwrap(),
            eval(&p, &[A, B]).unwrap()
        );
        let drop_b = PresenceWeights::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(eval_weighted(&p, &[A, B], &drop_b).unwrap(), 1.0);
        let half = PresenceWeights::new(vec![1.0, 0.5]).unwrap();
        assert!(close(
            eval_weighted(&p, &[A, B], &half).unwrap(),
            0.68927,
            1e-5
        ));
        assert!(matches!(
            PresenceWeights::<f64>::new(vec![0.0, 0.0]),
            Err(Error::AllMasked)
        ));
        assert!(PresenceWeights::new(vec![1.5]).is_err());
        let short = PresenceWeights::new(vec![1.0]).unwrap();
        assert!(eval_weighted(&p, &[A, B], &short).is_err());
    }

    #[test]
    fn half_weight_equals_ratio_case() {
        // lambda = [1, 0.5] on [a, b] has weights e^{0.5} : 0.5 e^{-0.5}, which is
        // the 2:1 ratio of [a, a, b] rescaled.
        let p = two_token();
        let half = PresenceWeights::new(vec![1.0, 0.5]).unwrap();
        let w = eval_weighted(&p, &[A, B], &half).unwrap();
        let e5 = 0.5f64.exp();
        let want = (e5 - 0.5 / e5) / (e5 + 0.5 / e5);
        assert!(close(w, want, 1e-12));
        assert!(close(w, eval(&p, &[A, A, B]).unwrap(), 1e-12));
    }

    #[test]
    fn linearized_examples() {
        let p = SlalomParams::new(vec![0.0, 0.0, 0.0], vec![0.3, -2.0, 1.0], 0.0).unwrap();
        let l = linearized_scores(&p, &[2, 0, 1], Linearization::Proportional).unwrap();
        assert_eq!(l, vec![1.0, 0.3, -2.0]);

        let p = two_token();
        let l = linearized_scores(&p, &[A, B], Linearization::Proportional).unwrap();
        assert!(close(l[0], 1.64872, 1e-5));
        assert!(close(l[1], -0.60653, 1e-5));

        let g = linearized_scores(&p, &[A, B], Linearization::ExactGradient).unwrap();
        let alpha = attention_weights(&p, &[A, B]).unwrap();
        let f = eval(&p, &[A, B]).unwrap();
        assert!(close(g[0], alpha[0] * (1.0 - f), 1e-12));
        assert!(close(g[1], alpha[1] * (-1.0 - f), 1e-12));
        assert!(close(g[0], 0.39322, 1e-5));
        assert!(close(g[1], -0.39322, 1e-5));
    }

    #[test]
    fn exact_gradient_matches_finite_difference() {
        let p = SlalomParams::new(vec![0.2, -1.0, 0.7], vec![1.5, -0.5, 0.25], 0.0).unwrap();
        let seq = [0, 1, 2, 1];
        let g = linearized_scores(&p, &seq, Linearization::ExactGradient).unwrap();
        let h = 1e-6;
        for i in 0..seq.len() {
            let mut lo = vec![1.0; seq.len()];
            lo[i] -= h;
            let up = PresenceWeights::ones(seq.len());
            let lo = PresenceWeights::new(lo).unwrap();
            // one-sided since lambda cannot exceed 1
            let fd =
                (eval_weighted(&p, &seq, &up).unwrap() - eval_weighted(&p, &seq, &lo).unwrap()) / h;
            assert!(close(fd, g[i], 1e-5), "{fd} vs {}", g[i]);
        }
    }

    /// Shapley values by enumerating all orderings.
    fn shapley_by_permutations(p: &SlalomParams, seq: &[TokenId]) -> Vec<f64> {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = seq.len();
        let value = |set: &[usize]| -> f64 {
            if set.is_empty() {
                0.0
            } else {
                let sub: Vec<TokenId> = set.iter().map(|&i| seq[i]).collect();
                eval(p, &sub).unwrap()
            }
        };
        let all = perms(n);
        let mut phi = vec![0.0; n];
        for order in &all {
            for (k, &i) in order.iter().enumerate() {
                phi[i] += value(&order[..=k]) - value(&order[..k]);
            }
        }
        phi.iter().map(|x| x / all.len() as f64).collect()
    }

    #[test]
    fn shapley_exact_examples() {
        let p = two_token();
        assert_eq!(shapley_exact(&p, &[B]).unwrap(), vec![-1.0]);
        let phi = shapley_exact(&p, &[A, B]).unwrap();
        assert!(close(phi[0], 1.23106, 1e-5));
        assert!(close(phi[1], -0.76894, 1e-5));
        assert!(close(phi[0] + phi[1], 0.46212, 1e-5));
        let phi = shapley_exact(&p, &[A, A]).unwrap();
        assert!(close(phi[0], 0.5, 1e-15) && close(phi[1], 0.5, 1e-15));
        assert!(matches!(
            shapley_exact(&p, &[A; 21]),
            Err(Error::TooLongForExact { len: 21, max: 20 })
        ));
    }

    #[test]
    fn shapley_exact_matches_enumeration() {
        let p =
            SlalomParams::new(vec![0.3, -1.2, 0.8, 0.1], vec![-0.4, 2.0, 0.9, -1.1], 0.0).unwrap();
        for seq in [vec![0, 1, 2, 3], vec![2, 2, 1, 0, 3], vec![3, 1]] {
            let fast = shapley_exact(&p, &seq).unwrap();
            let slow = shapley_by_permutations(&p, &seq);
            for (a, b) in fast.iter().zip(&slow) {
                assert!(close(*a, *b, 1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shapley_sampled_small_cases() {
        let p = two_token();
        let phi = shapley_sampled(&p, &[B], 5, 1).unwrap();
        assert_eq!(phi, vec![-1.0]);
        let phi = shapley_sampled(&p, &[A, B], 4000, 3).unwrap();
        // only two orderings exist, so the estimate is a binomial mix of them
        assert!(close(phi[0], 1.23106, 0.05));
        assert!(close(phi[1], -0.76894, 0.05));
        assert!(close(phi[0] + phi[1], eval(&p, &[A, B]).unwrap(), 1e-12));
        assert_eq!(phi, shapley_sampled(&p, &[A, B], 4000, 3).unwrap());
        assert!(shapley_sampled(&p, &[A, B], 0, 3).is_err());
        assert!(matches!(
            shapley_sampled(&p, &[], 3, 3),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn multiclass_examples() {
        let s = vec![0.4, -0.2, 0.9];
        let v = vec![1.0, -0.5, 2.0];
        let two = SlalomParams::new(s.clone(), v.clone(), 0.0).unwrap();
        let half: Vec<f64> = v.iter().map(|x| x / 2.0).collect();
        let neg: Vec<f64> = half.iter().map(|x| -x).collect();
        let mc = MultiClassSlalomParams::new(s, vec![neg, half], 0.0).unwrap();
        let seq = [0, 2, 1, 1];
        let out = eval_multiclass(&mc, &seq).unwrap();
        assert!(close(
            out.scores[1] - out.scores[0],
            eval(&two, &seq).unwrap(),
            1e-12
        ));

        let flat = MultiClassSlalomParams::new(vec![0.0; 2], vec![vec![0.0; 2]; 3], 0.0).unwrap();
        let out = eval_multiclass(&flat, &[0, 1]).unwrap();
        for p in out.posterior {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }

        let mc =
            MultiClassSlalomParams::new(vec![0.0], vec![vec![1.0], vec![0.0], vec![-1.0]], 0.0)
                .unwrap();
        let out = eval_multiclass(&mc, &[0]).unwrap();
        let want = [0.66524, 0.24473, 0.09003];
        for (p, w) in out.posterior.iter().zip(want) {
            assert!(close(*p, w, 1e-5));
        }
        assert!(close(out.posterior.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn works_in_single_precision() {
        let p: SlalomParams<f32> = two_token().cast();
        let f = eval(&p, &[A, B]).unwrap();
        assert!((f - 0.46212).abs() < 1e-5);
        let phi = shapley_exact(&p, &[A, B]).unwrap();
        assert!((phi[0] - 1.23106).abs() < 1e-4);
    }

    fn params_and_seq() -> impl Strategy<Value = (SlalomParams, Vec<TokenId>)> {
        (1usize..8).prop_flat_map(|nv| {
            (
                prop::collection::vec(-4.0f64..4.0, nv),
                prop::collection::vec(-3.0f64..3.0, nv),
                prop::collection::vec(0..nv, 1..12),
            )
                .prop_map(|(s, v, seq)| (SlalomParams::new(s, v, 0.0).unwrap(), seq))
        })
    }

    proptest! {
        #[test]
        fn shift_invariance((p, seq) in params_and_seq(), delta in -10.0f64..10.0) {
            let shifted = SlalomParams { s: p.s.iter().map(|x| x + delta).collect(), ..p.clone() };
            prop_assert!((eval(&p, &seq).unwrap() - eval(&shifted, &seq).unwrap()).abs() < 1e-12);
            let a = attention_weights(&p, &seq).unwrap();
            let b = attention_weights(&shifted, &seq).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let lam = PresenceWeights::new(vec![0.5; seq.len()]).unwrap();
            prop_assert!((eval_weighted(&p, &seq, &lam).unwrap()
                - eval_weighted(&shifted, &seq, &lam).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn output_is_a_convex_combination((p, seq) in params_and_seq()) {
            let f = eval(&p, &seq).unwrap();
            let lo = seq.iter().map(|&t| p.v[t]).fold(f64::INFINITY, f64::min);
            let hi = seq.iter().map(|&t| p.v[t]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
            let w: f64 = attention_weights(&p, &seq).unwrap().iter().sum();
            prop_assert!((w - 1.0).abs() < 1e-12);
        }

        #[test]
        fn repeated_token_is_length_invariant((p, seq) in params_and_seq(), k in 1usize..40) {
            let tok = seq[0];
            prop_assert!((eval(&p, &vec![tok; k]).unwrap() - p.v[tok]).abs() < 1e-14 * (1.0 + k as f64));
        }

        #[test]
        fn binary_mask_equals_subsequence(
            (p, seq) in params_and_seq(),
            bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let mut mask: Vec<f64> = seq.iter().zip(&bits).map(|(_, &b)| if b { 1.0 } else { 0.0 }).collect();
            mask[0] = 1.0;
            let sub: Vec<TokenId> = seq.iter().zip(&mask).filter(|(_, &m)| m > 0.0).map(|(&t, _)| t).collect();
            let lam = PresenceWeights::new(mask).unwrap();
            prop_assert_eq!(eval_weighted(&p, &seq, &lam).unwrap(), eval(&p, &sub).unwrap());
        }

        #[test]
        fn shapley_is_efficient_and_symmetric((p, seq) in params_and_seq()) {
            let phi = shapley_exact(&p, &seq).unwrap();
            let total: f64 = phi.iter().sum();
            prop_assert!((total - eval(&p, &seq).unwrap()).abs() < 1e-9);
            for i in 0..seq.len() {
                for j in 0..seq.len() {
                    if seq[i] == seq[j] {
                        prop_assert!((phi[i] - phi[j]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
