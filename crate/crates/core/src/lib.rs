//! Softmax-linked additive log-odds surrogates for black-box sequence
//! classifiers.
//!
//! A model assigns every token an importance `s` and a value `v`; the score of
//! a sequence is the softmax(`s`)-weighted mean of its values. The crate
//! evaluates such models, recovers them exactly from a SLALOM oracle, fits
//! them to arbitrary oracles, converts them to attributions, and ships the
//! transformer, data generators and metrics used to check all of that.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`), with `f64`
//! as the default type parameter and `…F32` aliases below.

// `!(x > y)` is how NaN is rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod fitting;
mod linalg;
pub mod metrics;
pub mod microformer;
pub mod model;
pub mod oracle;
pub mod params;
pub mod recovery;
pub mod scalar;
pub mod vocab;

pub use dataset::{LabeledDataset, Record};
pub use error::{Error, Result};
pub use fitting::{
    fit_eff, fit_fidel, fit_linear_surrogate, sample_pool_eff, sample_pool_fidel, EffHyper,
    FidelHyper, FittedSlalom, LinearSurrogate, SamplePool,
};
pub use microformer::{build_slalom_transformer, constancy_demo, MicroformerParams};
pub use model::{eval, eval_weighted, linearized_scores, shapley_exact, shapley_sampled};
pub use oracle::{Oracle, SlalomOracle};
pub use params::{MultiClassSlalomParams, SlalomParams};
pub use recovery::{recover, RecoveryReport};
pub use scalar::Scalar;
pub use vocab::{TokenId, TokenSeq, Vocabulary};

pub type SlalomParamsF32 = SlalomParams<f32>;
pub type SlalomParamsF64 = SlalomParams<f64>;
pub type MultiClassSlalomParamsF32 = MultiClassSlalomParams<f32>;
pub type MultiClassSlalomParamsF64 = MultiClassSlalomParams<f64>;
pub type MicroformerParamsF32 = MicroformerParams<f32>;
pub type MicroformerParamsF64 = MicroformerParams<f64>;
pub type FittedSlalomF32 = FittedSlalom<f32>;
pub type FittedSlalomF64 = FittedSlalom<f64>;
pub type SamplePoolF32 = SamplePool<f32>;
pub type SamplePoolF64 = SamplePool<f64>;
