//! Minibatch SGD on the mean squared error between oracle scores and the surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FittedSlalom, SamplePool};
use crate::error::{Error, Result};
use crate::params::SlalomParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EffHyper {
    /// Length `n` of each random sequence.
    pub seq_len: usize,
    /// Pool size `b`.
    pub pool_size: usize,
    /// Minibatch size `r`.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of SGD steps `c`.
    pub steps: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Target of `sum(s)` in the returned parameters.
    pub gamma: f64,
}

impl Default for EffHyper {
    fn default() -> Self {
        Self {
            seq_len: 2,
            pool_size: 5000,
            batch_size: 64,
            learning_rate: 1.0,
            steps: 5000,
            momentum: 0.0,
            gamma: 0.0,
        }
    }
}

impl EffHyper {
    pub fn check(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_size == 0 || self.pool_size < self.batch_size {
            return Err(Error::InvalidParams("need n >= 1 and b >= r >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParams(
                "need lr > 0 and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EffReport<T: Scalar = f64> {
    pub model: FittedSlalom<T>,
    /// Mean minibatch loss over each block of [`LOSS_WINDOW`] steps.
    pub loss_history: Vec<T>,
}

pub const LOSS_WINDOW: usize = 100;

/// Losses above this abort the fit.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Minibatch MSE and its gradients with respect to `s` and `v`.
///
/// `batch` holds sequences over the parameter indices of `p` with their target scores.
pub fn minibatch_loss_grad<T: Scalar>(
    p: &SlalomParams<T>,
    batch: &[(&[usize], T)],
) -> (T, Vec<T>, Vec<T>) {
    let m = p.vocab_size();
    let mut gs = vec![T::zero(); m];
    let mut gv = vec![T::zero(); m];
    let mut loss = T::zero();
    let scale = T::one() / T::from_count(batch.len());
    let two = T::lit(2.0);
    let mut alpha = Vec::new();
    for &(seq, y) in batch {
        let max = seq.iter().map(|&j| p.s[j]).fold(T::neg_infinity(), T::max);
        alpha.clear();
        alpha.extend(seq.iter().map(|&j| (p.s[j] - max).exp()));
        let z: T = alpha.iter().copied().sum();
        let mut f = T::zero();
        for (a, &j) in alpha.iter_mut().zip(seq) {
            *a = *a / z;
            f = f + *a * p.v[j];
        }
        let r = f - y;
        loss = loss + r * r * scale;
        let coef = two * r * scale;
        for (&a, &j) in alpha.iter().zip(seq) {
            gv[j] = gv[j] + coef * a;
            gs[j] = gs[j] + coef * a * (p.v[j] - f);
        }
    }
    (loss, gs, gv)
}

/// Fits by `steps` minibatch SGD updates starting from `s = v = 0`.
pub fn fit_eff<T: Scalar>(pool: &SamplePool<T>, h: &EffHyper, seed: u64) -> Result<EffReport<T>> {
    h.check()?;
    pool.check()?;
    let index: std::collections::HashMap<_, _> = pool
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    let local: Vec<(Vec<usize>, T)> = pool
        .records
        .iter()
        .map(|(s, y)| (s.iter().map(|t| index[t]).collect(), *y))
        .collect();

    let m = pool.tokens.len();
    let mut p = SlalomParams {
        s: vec![T::zero(); m],
        v: vec![T::zero(); m],
        gamma: T::zero(),
    };
    let mut vel_s = vec![T::zero(); m];
    let mut vel_v = vec![T::zero(); m];
    let lr = T::lit(h.learning_rate);
    let mu = T::lit(h.momentum);
    let limit = T::lit(50.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(h.steps / LOSS_WINDOW + 1);
    let mut window = T::zero();
    let mut batch: Vec<(&[usize], T)> = Vec::with_capacity(h.batch_size);
    for step in 0..h.steps {
        batch.clear();
        for _ in 0..h.batch_size {
            let (seq, y) = &local[rng.random_range(0..local.len())];
            batch.push((seq.as_slice(), *y));
        }
        let (loss, gs, gv) = minibatch_loss_grad(&p, &batch);
        if !(loss.as_f64() <= DIVERGENCE_LIMIT) {
            return Err(Error::DivergedLoss(loss.as_f64()));
        }
        for j in 0..m {
            vel_s[j] = mu * vel_s[j] - lr * gs[j];
            vel_v[j] = mu * vel_v[j] - lr * gv[j];
            p.s[j] = (p.s[j] + vel_s[j]).max(-limit).min(limit);
            p.v[j] = p.v[j] + vel_v[j];
        }
        window = window + loss;
        if (step + 1) % LOSS_WINDOW == 0 {
            history.push(window / T::from_count(LOSS_WINDOW));
            window = T::zero();
        }
    }
    p.gamma = T::lit(h.gamma);
    let p = p.normalize()?;
    Ok(EffReport {
        model: FittedSlalom::new(pool.tokens.clone(), p)?,
        loss_history: history,
    })
}
