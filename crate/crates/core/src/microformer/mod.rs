//! A single-layer multi-head transformer classifier without positional
//! embeddings.
//!
//! Per head, `q = h W_Q + b_Q`, `k = h W_K + b_K`, `v = h W_V + b_V` and the
//! attention row of the classified token is `softmax(q_r k_j / sqrt(d_h))`.
//! The head outputs are projected back by `P`, added to the input embedding,
//! passed through `ffn`, and classified by a two-logit head. The reported score
//! is the logit difference `l_1 - l_0`.

mod build;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use build::{
    build_slalom_transformer, build_slalom_transformer_with, constancy_demo, ConstancyReport,
};

use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::scalar::{softmax, Scalar};
use crate::vocab::TokenId;

/// Dense row-major matrix; vectors multiply from the left (`x M`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Matrix<T: Scalar = f64> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(scale * z)
            })
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, x: T) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x M + b`
    pub fn affine(&self, x: &[T], b: Option<&[T]>) -> Vec<T> {
        let mut out = match b {
            Some(b) => b.to_vec(),
            None => vec![T::zero(); self.cols],
        };
        for (r, &xr) in x.iter().enumerate() {
            if xr == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o = *o + xr * m;
            }
        }
        out
    }

    fn check_shape(&self, rows: usize, cols: usize, name: &str) -> Result<()> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{name} is {}x{} ({} entries), expected {rows}x{cols}",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "{name} has a non-finite entry"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Head<T: Scalar = f64> {
    pub w_q: Matrix<T>,
    pub b_q: Vec<T>,
    pub w_k: Matrix<T>,
    pub b_k: Vec<T>,
    pub w_v: Matrix<T>,
    pub b_v: Vec<T>,
    /// Projection back to the embedding dimension, `d_h x d`.
    pub p: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let c = (T::lit(2.0) / T::PI()).sqrt();
                T::lit(0.5) * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "T: Scalar")]
pub enum Ffn<T: Scalar = f64> {
    Identity,
    /// `act(x W_1 + b_1) W_2 + b_2`, plus `x` when `residual` is set.
    Mlp {
        w1: Matrix<T>,
        b1: Vec<T>,
        w2: Matrix<T>,
        b2: Vec<T>,
        activation: Activation,
        residual: bool,
    },
}

impl<T: Scalar> Ffn<T> {
    fn apply(&self, x: Vec<T>) -> Vec<T> {
        match self {
            Ffn::Identity => x,
            Ffn::Mlp {
                w1,
                b1,
                w2,
                b2,
                activation,
                residual,
            } => {
                let hidden: Vec<T> = w1
                    .affine(&x, Some(b1))
                    .into_iter()
                    .map(|z| activation.apply(z))
                    .collect();
                let mut out = w2.affine(&hidden, Some(b2));
                if *residual {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = *o + xi;
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Bidirectional attention, classification at the first token.
    Encoder,
    /// Causal attention, classification at the last token.
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MicroformerParams<T: Scalar = f64> {
    pub d: usize,
    pub d_head: usize,
    pub context: usize,
    pub mode: Mode,
    /// `|V| x d`
    pub embedding: Matrix<T>,
    pub heads: Vec<Head<T>>,
    pub ffn: Ffn<T>,
    /// `2 x d`; row `c` produces logit `c`.
    pub w_cls: Matrix<T>,
    pub b_cls: Vec<T>,
}

/// Shape of a randomly initialized feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FfnKind {
    Identity,
    Mlp {
        hidden: usize,
        activation: Activation,
    },
}

impl<T: Scalar> MicroformerParams<T> {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    pub fn check(&self) -> Result<()> {
        let (d, dh) = (self.d, self.d_head);
        if d == 0 || dh == 0 || self.heads.is_empty() {
            return Err(Error::DimMismatch("need d, d_head, heads >= 1".into()));
        }
        self.embedding
            .check_shape(self.embedding.rows, d, "embedding")?;
        for (i, h) in self.heads.iter().enumerate() {
            h.w_q.check_shape(d, dh, &format!("head {i} W_Q"))?;
            h.w_k.check_shape(d, dh, &format!("head {i} W_K"))?;
            h.w_v.check_shape(d, dh, &format!("head {i} W_V"))?;
            h.p.check_shape(dh, d, &format!("head {i} P"))?;
            for (b, name) in [(&h.b_q, "b_Q"), (&h.b_k, "b_K"), (&h.b_v, "b_V")] {
                if b.len() != dh {
                    return Err(Error::DimMismatch(format!(
                        "head {i} {name} has {} entries",
                        b.len()
                    )));
                }
            }
        }
        if let Ffn::Mlp { w1, b1, w2, b2, .. } = &self.ffn {
            w1.check_shape(d, w1.cols, "ffn W_1")?;
            w2.check_shape(w1.cols, d, "ffn W_2")?;
            if b1.len() != w1.cols || b2.len() != d {
                return Err(Error::DimMismatch("ffn bias sizes".into()));
            }
        }
        self.w_cls.check_shape(2, d, "W_cls")?;
        if self.b_cls.len() != 2 {
            return Err(Error::DimMismatch("b_cls must have two entries".into()));
        }
        Ok(())
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        vocab_size: usize,
        d: usize,
        d_head: usize,
        heads: usize,
        mode: Mode,
        ffn: FfnKind,
    ) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        let sh = 1.0 / (d_head as f64).sqrt();
        let vec = |n: usize, rng: &mut R| Matrix::<T>::random(1, n, 0.1, rng).data;
        let heads = (0..heads)
            .map(|_| Head {
                w_q: Matrix::random(d, d_head, sd, rng),
                b_q: vec(d_head, rng),
                w_k: Matrix::random(d, d_head, sd, rng),
                b_k: vec(d_head, rng),
                w_v: Matrix::random(d, d_head, sd, rng),
                b_v: vec(d_head, rng),
                p: Matrix::random(d_head, d, sh, rng),
            })
            .collect();
        let ffn = match ffn {
            FfnKind::Identity => Ffn::Identity,
            FfnKind::Mlp { hidden, activation } => Ffn::Mlp {
                w1: Matrix::random(d, hidden, sd, rng),
                b1: vec(hidden, rng),
                w2: Matrix::random(hidden, d, 1.0 / (hidden as f64).sqrt(), rng),
                b2: vec(d, rng),
                activation,
                residual: true,
            },
        };
        Self {
            d,
            d_head,
            context: 512,
            mode,
            embedding: Matrix::random(vocab_size, d, 1.0, rng),
            heads,
            ffn,
            w_cls: Matrix::random(2, d, sd, rng),
            b_cls: vec(2, rng),
        }
    }

    /// Copy with independent `N(0, scale^2)` noise added to every weight
    /// except the embedding table.
    pub fn perturbed<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Self {
        let mut out = self.clone();
        let mut jitter = |xs: &mut [T]| {
            for x in xs {
                let z: f64 = StandardNormal.sample(rng);
                *x = *x + T::lit(scale * z);
            }
        };
        for h in &mut out.heads {
            for m in [&mut h.w_q, &mut h.w_k, &mut h.w_v, &mut h.p] {
                jitter(&mut m.data);
            }
            for b in [&mut h.b_q, &mut h.b_k, &mut h.b_v] {
                jitter(b);
            }
        }
        if let Ffn::Mlp { w1, b1, w2, b2, .. } = &mut out.ffn {
            jitter(&mut w1.data);
            jitter(b1);
            jitter(&mut w2.data);
            jitter(b2);
        }
        jitter(&mut out.w_cls.data);
        jitter(&mut out.b_cls);
        out
    }

    fn validate(&self, seq: &[TokenId]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        crate::vocab::validate_sequence(self.vocab_size(), seq, self.context)
    }

    /// Index of the token whose output is classified.
    pub fn cls_index(&self, len: usize) -> usize {
        match self.mode {
            Mode::Encoder => 0,
            Mode::Decoder => len - 1,
        }
    }

    /// Full attention matrix of one head; masked entries are exactly zero.
    pub fn attention(&self, head: usize, seq: &[TokenId]) -> Result<Vec<Vec<T>>> {
        self.check()?;
        self.validate(seq)?;
        let h = self
            .heads
            .get(head)
            .ok_or_else(|| Error::DimMismatch(format!("no head {head}")))?;
        let emb: Vec<&[T]> = seq.iter().map(|&t| self.embedding.row(t)).collect();
        let keys: Vec<Vec<T>> = emb.iter().map(|e| h.w_k.affine(e, Some(&h.b_k))).collect();
        Ok(emb
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let q = h.w_q.affine(e, Some(&h.b_q));
                let visible = match self.mode {
                    Mode::Encoder => seq.len(),
                    Mode::Decoder => i + 1,
                };
                let mut row = self.attention_row(&q, &keys[..visible]);
                row.resize(seq.len(), T::zero());
                row
            })
            .collect())
    }

    fn attention_logits(&self, q: &[T], keys: &[Vec<T>]) -> Vec<T> {
        let scale = T::one() / T::from_count(self.d_head).sqrt();
        keys.iter()
            .map(|k| q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale)
            .collect()
    }

    fn attention_row(&self, q: &[T], keys: &[Vec<T>]) -> Vec<T> {
        softmax(&self.attention_logits(q, keys))
    }

    /// Class logits `[l_0, l_1]`.
    pub fn logits(&self, seq: &[TokenId]) -> Result<[T; 2]> {
        self.check()?;
        self.validate(seq)?;
        let r = self.cls_index(seq.len());
        let visible = match self.mode {
            Mode::Encoder => seq.len(),
            Mode::Decoder => r + 1,
        };
        let emb: Vec<&[T]> = seq[..visible]
            .iter()
            .map(|&t| self.embedding.row(t))
            .collect();
        let mut out = emb[r].to_vec();
        for h in &self.heads {
            let q = h.w_q.affine(emb[r], Some(&h.b_q));
            let keys: Vec<Vec<T>> = emb.iter().map(|e| h.w_k.affine(e, Some(&h.b_k))).collect();
            // softmax-weighted mean as one ratio, so equal scores average exactly
            let weights = self.attention_logits(&q, &keys);
            let max = weights.iter().copied().fold(T::neg_infinity(), T::max);
            let mut mixed = vec![T::zero(); self.d_head];
            let mut total = T::zero();
            for (&l, e) in weights.iter().zip(&emb) {
                let w = (l - max).exp();
                total = total + w;
                for (m, x) in mixed.iter_mut().zip(h.w_v.affine(e, Some(&h.b_v))) {
                    *m = *m + w * x;
                }
            }
            for m in &mut mixed {
                *m = *m / total;
            }
            for (o, x) in out.iter_mut().zip(h.p.affine(&mixed, None)) {
                *o = *o + x;
            }
        }
        let hidden = self.ffn.apply(out);
        let logit = |c: usize| {
            self.w_cls
                .row(c)
                .iter()
                .zip(&hidden)
                .map(|(&w, &x)| w * x)
                .sum::<T>()
                + self.b_cls[c]
        };
        Ok([logit(0), logit(1)])
    }

    /// Log odds `l_1 - l_0`.
    pub fn forward(&self, seq: &[TokenId]) -> Result<T> {
        let [l0, l1] = self.logits(seq)?;
        Ok(l1 - l0)
    }
}

impl<T: Scalar> Oracle<T> for MicroformerParams<T> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        self.forward(seq)
    }
    fn vocab_size(&self) -> Option<usize> {
        Some(MicroformerParams::vocab_size(self))
    }
}

/// A model that always sees a reserved classification token: prepended in
/// encoder mode and appended in decoder mode, so perturbing the explained
/// tokens never removes the position that is classified.
#[derive(Debug, Clone, PartialEq)]
pub struct WithClsToken<T: Scalar = f64> {
    pub model: MicroformerParams<T>,
    pub cls: TokenId,
}

impl<T: Scalar> WithClsToken<T> {
    pub fn new(model: MicroformerParams<T>, cls: TokenId) -> Result<Self> {
        model.check()?;
        if cls >= model.vocab_size() {
            return Err(Error::OutOfVocab {
                id: cls,
                size: model.vocab_size(),
            });
        }
        Ok(Self { model, cls })
    }

    pub fn wrap(&self, seq: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(seq.len() + 1);
        match self.model.mode {
            Mode::Encoder => {
                out.push(self.cls);
                out.extend_from_slice(seq);
            }
            Mode::Decoder => {
                out.extend_from_slice(seq);
                out.push(self.cls);
            }
        }
        out
    }
}

impl<T: Scalar> Oracle<T> for WithClsToken<T> {
    fn score(&self, seq: &[TokenId]) -> Result<T> {
        self.model.forward(&self.wrap(seq))
    }
    fn empty_score(&self) -> Option<T> {
        self.model.forward(&[self.cls]).ok()
    }
    fn vocab_size(&self) -> Option<usize> {
        Some(self.model.vocab_size())
    }
}
