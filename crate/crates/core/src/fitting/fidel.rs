//! Alternating least squares fit on deletion perturbations.
//!
//! With `s` fixed the surrogate is linear in `v`, which is solved through the
//! normal equations. With `v` fixed, writing `u = exp(s)` turns every sample
//! into the homogeneous equation `sum_j u_j c_ij (v_j - f_i) = 0`; the `s` step
//! first solves that system under `u >= 0, sum(u) = |V|` and then polishes the
//! result with damped Gauss-Newton on the squared-error objective itself.
//! Deletion pools of long sequences couple `s` and `v` tightly enough that
//! block alternation crawls, so every outer iteration closes with a few joint
//! Gauss-Newton steps over both. Each step is only accepted when it does not
//! increase the objective.

use super::{Design, FittedSlalom, SamplePool};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, solve_gram, Square};
use crate::model::S_CLAMP;
use crate::params::{center, SlalomParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FidelHyper {
    /// Most positions deleted from one perturbed copy (`K`).
    pub max_deletions: usize,
    pub pool_size: usize,
    pub outer_iters: usize,
    /// Gauss-Newton iterations inside each `s` step.
    pub inner_iters: usize,
    /// Joint `(s, v)` Gauss-Newton iterations closing each outer iteration;
    /// 0 gives plain alternation.
    pub joint_iters: usize,
    pub gamma: f64,
}

impl Default for FidelHyper {
    fn default() -> Self {
        Self {
            max_deletions: 5,
            pool_size: 2000,
            outer_iters: 10,
            inner_iters: 20,
            joint_iters: 20,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FidelReport<T: Scalar = f64> {
    pub model: FittedSlalom<T>,
    /// Sum of squared residuals at the start and after every outer iteration.
    pub objective_history: Vec<T>,
    /// Set when the value step needed ridge regularization.
    pub rank_deficient: bool,
}

pub fn fit_fidel<T: Scalar>(pool: &SamplePool<T>, h: &FidelHyper) -> Result<FidelReport<T>> {
    pool.check()?;
    if h.max_deletions == 0 && h.outer_iters == 0 {
        return Err(Error::InvalidParams("nothing to do".into()));
    }
    let design = pool.design();
    let m = design.m;
    let mut s = vec![T::zero(); m];
    let mut v = vec![T::zero(); m];
    let mut obj = design.objective(&s, &v);
    let mut history = vec![obj];
    let mut rank_deficient = false;

    for _ in 0..h.outer_iters {
        let (v_new, ridge) = value_step(&design, &s)?;
        rank_deficient |= ridge;
        let cand = design.objective(&s, &v_new);
        if cand <= obj {
            v = v_new;
            obj = cand;
        }

        let (s_new, cand) = importance_step(&design, &s, &v, obj, h.inner_iters)?;
        if cand <= obj {
            s = s_new;
            obj = cand;
        }

        if h.joint_iters > 0 {
            let (s_new, v_new, cand) =
                levenberg_marquardt(&design, s.clone(), v.clone(), obj, h.joint_iters, true);
            if cand <= obj {
                (s, v, obj) = (s_new, v_new, cand);
            }
        }
        history.push(obj);
    }

    let params = SlalomParams::new(center(&s, T::lit(h.gamma)), v, T::lit(h.gamma))?;
    Ok(FidelReport {
        model: FittedSlalom::new(pool.tokens.clone(), params)?,
        objective_history: history,
        rank_deficient,
    })
}

/// Ordinary least squares for `v` with the attention matrix fixed.
fn value_step<T: Scalar>(d: &Design<T>, s: &[T]) -> Result<(Vec<T>, bool)> {
    let zeros = vec![T::zero(); d.m];
    let mut gram = Square::zeros(d.m);
    let mut rhs = vec![T::zero(); d.m];
    for i in 0..d.rows.len() {
        let (alpha, _) = d.attention_row(i, s, &zeros);
        for (p, &(j, a)) in alpha.iter().enumerate() {
            rhs[j] = rhs[j] + a * d.y[i];
            let dst = &mut gram.data[j * d.m..(j + 1) * d.m];
            for &(k, b) in &alpha[p..] {
                dst[k] = dst[k] + a * b;
            }
        }
    }
    gram.symmetrize_halves();
    solve_gram(&gram, &rhs).ok_or_else(|| Error::InvalidParams("value step failed".into()))
}

/// Returns the improved importances and their objective.
fn importance_step<T: Scalar>(
    d: &Design<T>,
    s: &[T],
    v: &[T],
    obj: T,
    iters: usize,
) -> Result<(Vec<T>, T)> {
    let mut best = (s.to_vec(), obj);
    if let Some(u) = homogeneous_step(d, s, v)? {
        let c = T::lit(S_CLAMP);
        let s_h: Vec<T> = u.iter().map(|&x| x.ln().max(-c).min(c)).collect();
        let o = d.objective(&s_h, v);
        if o < best.1 {
            best = (s_h, o);
        }
    }
    let (s, _, o) = levenberg_marquardt(d, best.0, v.to_vec(), best.1, iters, false);
    Ok((s, o))
}

/// Minimizes `|E u|^2` over `u > 0, sum(u) = m` with a log barrier, starting
/// from `u = exp(s)`. Returns `None` when the system carries no information.
fn homogeneous_step<T: Scalar>(d: &Design<T>, s: &[T], v: &[T]) -> Result<Option<Vec<T>>> {
    let m = d.m;
    let mut q = Square::zeros(m);
    let mut row = vec![T::zero(); m];
    for (i, counts) in d.rows.iter().enumerate() {
        for &(j, c) in counts {
            row[j] = c * (v[j] - d.y[i]);
        }
        q.rank_one(&row, T::one());
        for &(j, _) in counts {
            row[j] = T::zero();
        }
    }
    let scale = q.max_diag();
    if !(scale > T::zero()) {
        return Ok(None);
    }
    for x in &mut q.data {
        *x = *x / scale;
    }

    let mf = T::from_count(m);
    let c = T::lit(S_CLAMP);
    let shift = s.iter().copied().fold(T::neg_infinity(), T::max);
    let mut u: Vec<T> = s
        .iter()
        .map(|&x| (x.max(-c).min(c) - shift).exp())
        .collect();
    let total: T = u.iter().copied().sum();
    for x in &mut u {
        *x = (*x * mf / total).max(T::lit(1e-12));
    }

    let quad = |u: &[T]| -> T { u.iter().zip(q.mul_vec(u)).map(|(&a, b)| a * b).sum() };
    let barrier = |u: &[T], mu: T| -> T { quad(u) - mu * u.iter().map(|x| x.ln()).sum::<T>() };

    let two = T::lit(2.0);
    let mut mu = (quad(&u) / mf).max(T::lit(1e-6));
    let mu_min = T::lit(1e-14);
    'outer: while mu > mu_min {
        for _ in 0..50 {
            let qu = q.mul_vec(&u);
            let g: Vec<T> = (0..m).map(|j| two * qu[j] - mu / u[j]).collect();
            let mut hess = q.clone();
            for x in &mut hess.data {
                *x = *x * two;
            }
            for j in 0..m {
                *hess.at_mut(j, j) = hess.at(j, j) + mu / (u[j] * u[j]);
            }
            // at single precision the barrier term can vanish against `q`;
            // the current iterate is still feasible and the polish takes over
            let Some(l) = cholesky(&hess, T::zero()) else {
                break 'outer;
            };
            // step restricted to sum(du) = 0
            let hg = cholesky_solve(&l, &g);
            let h1 = cholesky_solve(&l, &vec![T::one(); m]);
            let nu = -hg.iter().copied().sum::<T>() / h1.iter().copied().sum::<T>();
            let du: Vec<T> = (0..m).map(|j| -(hg[j] + nu * h1[j])).collect();
            let decrement: T = -du.iter().zip(&g).map(|(&a, &b)| a * b).sum::<T>();
            if !(decrement > T::lit(1e-14) * (T::one() + barrier(&u, mu).abs())) {
                break;
            }
            let mut step = T::one();
            for j in 0..m {
                if du[j] < T::zero() {
                    step = step.min(T::lit(0.99) * -u[j] / du[j]);
                }
            }
            let f0 = barrier(&u, mu);
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<T> = (0..m).map(|j| u[j] + step * du[j]).collect();
                if trial.iter().all(|&x| x > T::zero())
                    && barrier(&trial, mu) <= f0 - T::lit(1e-4) * step * decrement
                {
                    u = trial;
                    accepted = true;
                    break;
                }
                step = step / two;
            }
            if !accepted {
                break;
            }
        }
        mu = mu * T::lit(0.1);
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::InfeasibleSStep("non-finite iterate".into()));
    }
    Ok(Some(u))
}

/// Levenberg-Marquardt on `sum_i (F_i - f_i)^2` over `s` alone, or over
/// `s` and `v` jointly when `joint` is set.
fn levenberg_marquardt<T: Scalar>(
    d: &Design<T>,
    mut s: Vec<T>,
    mut v: Vec<T>,
    mut obj: T,
    iters: usize,
    joint: bool,
) -> (Vec<T>, Vec<T>, T) {
    let m = d.m;
    let n = if joint { 2 * m } else { m };
    let c = T::lit(S_CLAMP);
    let mut damping = T::lit(1e-3);
    let mut jrow = vec![T::zero(); n];
    let mut idx = Vec::with_capacity(n);
    for _ in 0..iters {
        let mut jtj = Square::zeros(n);
        let mut jtr = vec![T::zero(); n];
        for i in 0..d.rows.len() {
            let (alpha, f) = d.attention_row(i, &s, &v);
            let r = f - d.y[i];
            idx.clear();
            for &(j, a) in &alpha {
                jrow[j] = a * (v[j] - f);
                idx.push(j);
                if joint {
                    jrow[m + j] = a;
                    idx.push(m + j);
                }
            }
            for (a, &j) in idx.iter().enumerate() {
                let xj = jrow[j];
                jtr[j] = jtr[j] + xj * r;
                let dst = &mut jtj.data[j * n..(j + 1) * n];
                for &k in &idx[a..] {
                    dst[k] = dst[k] + xj * jrow[k];
                }
            }
        }
        jtj.symmetrize_halves();
        let scale = jtj.max_diag();
        if !(scale > T::zero()) {
            break;
        }
        let mut improved = false;
        while damping < T::lit(1e12) {
            let mut sys = jtj.clone();
            sys.add_diag(damping * scale);
            let Some(l) = cholesky(&sys, T::zero()) else {
                damping = damping * T::lit(10.0);
                continue;
            };
            let step = cholesky_solve(&l, &jtr);
            let s_try: Vec<T> = s
                .iter()
                .zip(&step)
                .map(|(&x, &dx)| (x - dx).max(-c).min(c))
                .collect();
            let v_try: Vec<T> = if joint {
                v.iter().zip(&step[m..]).map(|(&x, &dx)| x - dx).collect()
            } else {
                v.clone()
            };
            let o = d.objective(&s_try, &v_try);
            if o < obj {
                let rel = (obj - o) / obj.max(T::min_positive_value());
                s = s_try;
                v = v_try;
                obj = o;
                damping = (damping * T::lit(0.3)).max(T::lit(1e-12));
                improved = rel > T::lit(1e-15);
                break;
            }
            damping = damping * T::lit(10.0);
        }
        if !improved {
            break;
        }
    }
    (s, v, obj)
}
