use serde::{Deserialize, Serialize};

use super::{Ffn, Head, Matrix, MicroformerParams, Mode};
use crate::error::{Error, Result};
use crate::model::S_CLAMP;
use crate::oracle::Oracle;
use crate::params::SlalomParams;
use crate::scalar::Scalar;
use crate::vocab::TokenId;

/// Encoder-mode transformer with one head whose output equals `eval(p, ·)`.
pub fn build_slalom_transformer<T: Scalar>(
    p: &SlalomParams<T>,
    d: usize,
    d_head: usize,
) -> Result<MicroformerParams<T>> {
    build_slalom_transformer_with(p, d, d_head, 1, Mode::Encoder)
}

/// Embeddings are `[s, v, 0, ...]`. Head 0 has a constant query and a key
/// that reads slot 0 scaled by `sqrt(d_h)`, so its pre-softmax score at
/// position `j` is `s(t_j)`; its value map moves slot 1 into slot 2, which the
/// classifier reads. The remaining heads are zero and projected away.
pub fn build_slalom_transformer_with<T: Scalar>(
    p: &SlalomParams<T>,
    d: usize,
    d_head: usize,
    heads: usize,
    mode: Mode,
) -> Result<MicroformerParams<T>> {
    p.check()?;
    for dim in [d, d_head] {
        if dim < 3 {
            return Err(Error::DimTooSmall { got: dim, min: 3 });
        }
    }
    if heads == 0 {
        return Err(Error::InvalidParams("need at least one head".into()));
    }
    let n = p.vocab_size();
    let clamp = T::lit(S_CLAMP);
    let mut embedding = Matrix::zeros(n, d);
    for t in 0..n {
        embedding.set(t, 0, p.s[t].max(-clamp).min(clamp));
        embedding.set(t, 1, p.v[t]);
    }
    let zero_head = || Head {
        w_q: Matrix::zeros(d, d_head),
        b_q: vec![T::zero(); d_head],
        w_k: Matrix::zeros(d, d_head),
        b_k: vec![T::zero(); d_head],
        w_v: Matrix::zeros(d, d_head),
        b_v: vec![T::zero(); d_head],
        p: Matrix::zeros(d_head, d),
    };
    let mut first = zero_head();
    first.b_q[0] = T::one();
    first.w_k.set(0, 0, T::from_count(d_head).sqrt());
    first.w_v.set(1, 2, T::one());
    for i in 0..d.min(d_head) {
        first.p.set(i, i, T::one());
    }
    let mut all = vec![first];
    all.extend((1..heads).map(|_| zero_head()));
    let mut w_cls = Matrix::zeros(2, d);
    w_cls.set(1, 2, T::one());
    Ok(MicroformerParams {
        d,
        d_head,
        context: usize::MAX,
        mode,
        embedding,
        heads: all,
        ffn: Ffn::Identity,
        w_cls,
        b_cls: vec![T::zero(); 2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConstancyReport<T: Scalar = f64> {
    pub token: TokenId,
    /// Output on `[token; k]` for `k = 1..=C`.
    pub outputs: Vec<T>,
    pub spread: T,
}

/// Scores `[token; k]` for every `k` in `1..=max_len`.
pub fn constancy_demo<T, O>(
    oracle: &O,
    token: TokenId,
    max_len: usize,
) -> Result<ConstancyReport<T>>
where
    T: Scalar,
    O: Oracle<T> + ?Sized,
{
    if max_len < 2 {
        return Err(Error::InvalidParams(format!(
            "constancy demo needs C >= 2, got {max_len}"
        )));
    }
    let outputs = (1..=max_len)
        .map(|k| oracle.score(&vec![token; k]))
        .collect::<Result<Vec<T>>>()?;
    let hi = outputs.iter().copied().fold(T::neg_infinity(), T::max);
    let lo = outputs.iter().copied().fold(T::infinity(), T::min);
    Ok(ConstancyReport {
        token,
        outputs,
        spread: hi - lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microformer::{Activation, FfnKind};
    use crate::model::eval;
    use crate::oracle::{make_linear_oracle, LinearModelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_token() -> SlalomParams {
        SlalomParams::new(vec![0.5, -0.5], vec![1.0, -1.0], 0.0).unwrap()
    }

    #[test]
    fn construction_examples() {
        let m = build_slalom_transformer(&two_token(), 3, 3).unwrap();
        assert!((m.forward(&[0, 1]).unwrap() - 0.46212).abs() < 1e-5);
        assert!((m.forward(&[0, 0, 1]).unwrap() - 0.68927).abs() < 1e-5);
        assert_eq!(m.forward(&[0]).unwrap(), 1.0);
        assert_eq!(m.forward(&[1]).unwrap(), -1.0);
    }

    #[test]
    fn small_dims_rejected() {
        assert!(matches!(
            build_slalom_transformer(&two_token(), 2, 3),
            Err(Error::DimTooSmall { got: 2, min: 3 })
        ));
        assert!(matches!(
            build_slalom_transformer(&two_token(), 4, 2),
            Err(Error::DimTooSmall { got: 2, .. })
        ));
    }

    #[test]
    fn construction_constancy_is_exact() {
        let m = build_slalom_transformer(&two_token(), 4, 3).unwrap();
        let r = constancy_demo(&m, 0, 30).unwrap();
        assert_eq!(r.outputs.len(), 30);
        assert!(r.outputs.iter().all(|&x| x == 1.0));
        assert_eq!(r.spread, 0.0);
    }

    #[test]
    fn linear_control_spread_grows() {
        let lin = make_linear_oracle(LinearModelParams::new(vec![1.5, 0.0], 0.0).unwrap());
        let r = constancy_demo(&lin, 0, 10).unwrap();
        assert_eq!(r.outputs[3], 6.0);
        assert_eq!(r.spread, 13.5);
        assert!(constancy_demo(&lin, 0, 1).is_err());
    }

    #[test]
    fn multi_head_decoder_build_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = crate::datagen::gen_slalom_params(
            &crate::datagen::SlalomDatasetSpec::new(12),
            rng.random(),
        )
        .unwrap();
        let m = build_slalom_transformer_with(&p, 5, 4, 3, Mode::Decoder).unwrap();
        for len in 1..20 {
            let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..12)).collect();
            assert!((m.forward(&seq).unwrap() - eval(&p, &seq).unwrap()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn builder_equals_eval(
            s in prop::collection::vec(-8.0f64..8.0, 6),
            v in prop::collection::vec(-3.0f64..3.0, 6),
            seq in prop::collection::vec(0usize..6, 1..25),
            d in 3usize..6,
            dh in 3usize..6,
        ) {
            let p = SlalomParams::new(s, v, 0.0).unwrap().normalize().unwrap();
            let m = build_slalom_transformer(&p, d, dh).unwrap();
            prop_assert!((m.forward(&seq).unwrap() - eval(&p, &seq).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn random_transformers_are_length_blind(
            seed in any::<u64>(),
            heads in 1usize..4,
            decoder in any::<bool>(),
            tok in 0usize..7,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mode = if decoder { Mode::Decoder } else { Mode::Encoder };
            let ffn = FfnKind::Mlp { hidden: 6, activation: Activation::Tanh };
            let m: MicroformerParams = MicroformerParams::random(&mut rng, 7, 4, 3, heads, mode, ffn);
            let r = constancy_demo(&m, tok, 20).unwrap();
            let scale = r.outputs.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            prop_assert!(r.spread < 1e-9 * scale);
        }
    }
}
