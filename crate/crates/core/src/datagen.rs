//! Synthetic labeled datasets: the ten-word linear dataset and datasets
//! drawn from a SLALOM model.

use num_rational::Ratio;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Normal, StandardNormal};

use crate::dataset::{LabeledDataset, Record};
use crate::error::{Error, Result};
use crate::model::eval;
use crate::oracle::{make_linear_oracle, LinearModelParams, LinearOracle};
use crate::params::SlalomParams;
use crate::scalar::sigmoid;
use crate::vocab::{TokenSeq, Vocabulary};

pub const SENTIMENT_TOKENS: [&str; 10] = [
    "the", "we", "movie", "watch", "good", "best", "perfect", "ok", "bad", "worst",
];
pub const SENTIMENT_WEIGHTS: [f64; 10] = [0.0, 0.0, 0.0, 0.0, 0.6, 1.0, 1.5, -0.6, -1.0, -1.5];
/// Denominators of the occurrence probabilities (all numerators are 1).
const SENTIMENT_DENOMS: [u32; 10] = [6, 6, 6, 6, 15, 20, 20, 15, 20, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDatasetSpec {
    pub vocab: Vocabulary,
    pub weights: Vec<f64>,
    pub probs: Vec<Ratio<u32>>,
    pub offset: f64,
    /// Lengths are `Bin(max_len, len_p)`, zero draws resampled.
    pub max_len: u64,
    pub len_p: f64,
}

impl LinearDatasetSpec {
    pub fn sentiment() -> Self {
        Self {
            vocab: Vocabulary::new(SENTIMENT_TOKENS).expect("distinct tokens"),
            weights: SENTIMENT_WEIGHTS.to_vec(),
            probs: SENTIMENT_DENOMS.iter().map(|&d| Ratio::new(1, d)).collect(),
            offset: 0.0,
            max_len: 30,
            len_p: 0.5,
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.vocab.len();
        if self.weights.len() != n || self.probs.len() != n {
            return Err(Error::InvalidParams(format!(
                "{n} tokens but {} weights and {} probabilities",
                self.weights.len(),
                self.probs.len()
            )));
        }
        let total: Ratio<u32> = self.probs.iter().sum();
        if total != Ratio::from_integer(1) {
            return Err(Error::InvalidParams(format!(
                "occurrence probabilities sum to {total}"
            )));
        }
        if !(self.len_p > 0.0 && self.len_p <= 1.0) || self.max_len == 0 {
            return Err(Error::InvalidParams(
                "length law must allow nonzero lengths".into(),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.offset.is_finite() {
            return Err(Error::InvalidParams("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.probs
            .iter()
            .map(|r| *r.numer() as f64 / *r.denom() as f64)
            .collect()
    }

    pub fn oracle(&self) -> Result<LinearOracle> {
        Ok(make_linear_oracle(LinearModelParams::new(
            self.weights.clone(),
            self.offset,
        )?))
    }
}

/// Bernoulli draw with success probability `sigmoid(log_odds)`.
pub fn sample_label<R: Rng + ?Sized>(log_odds: f64, rng: &mut R) -> u8 {
    u8::from(rng.random::<f64>() < sigmoid(log_odds))
}

pub fn gen_linear_dataset(spec: &LinearDatasetSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.check()?;
    if n == 0 {
        return Err(Error::InvalidParams("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths =
        Binomial::new(spec.max_len, spec.len_p).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let tokens = WeightedIndex::new(spec.probabilities())
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    let records = (0..n)
        .map(|_| {
            let len = loop {
                let l = lengths.sample(&mut rng) as usize;
                if l > 0 {
                    break l;
                }
            };
            let ids: TokenSeq = (0..len).map(|_| tokens.sample(&mut rng)).collect();
            let f = spec.offset + ids.iter().map(|&t| spec.weights[t]).sum::<f64>();
            Record {
                label: sample_label(f, &mut rng),
                ids,
                log_odds: Some(f),
            }
        })
        .collect();
    LabeledDataset::new(spec.vocab.clone(), records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlalomDatasetSpec {
    pub size: usize,
    /// Token values; drawn from `N(0, value_sd^2)` when absent.
    pub values: Option<Vec<f64>>,
    pub value_sd: f64,
    /// Scale of the unit-normal noise added to `5 sign(v)|v|^1.5`.
    pub noise: f64,
    pub gamma: f64,
    pub max_len: usize,
}

impl SlalomDatasetSpec {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            values: None,
            value_sd: 0.5,
            noise: 0.5,
            gamma: 0.0,
            max_len: 30,
        }
    }

    pub fn with_values(values: Vec<f64>) -> Self {
        Self {
            values: Some(values.clone()),
            ..Self::new(values.len())
        }
    }
}

/// `5 sign(v) |v|^{3/2}`
pub fn importance_from_value(v: f64) -> f64 {
    5.0 * v.signum() * v.abs().powf(1.5)
}

/// Importances before normalization.
pub fn raw_importances<R: Rng + ?Sized>(values: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            importance_from_value(v) + noise * z
        })
        .collect()
}

pub fn gen_slalom_params(spec: &SlalomDatasetSpec, seed: u64) -> Result<SlalomParams> {
    if spec.size == 0 {
        return Err(Error::InvalidParams(
            "vocabulary size must be positive".into(),
        ));
    }
    if !spec.noise.is_finite() || spec.noise < 0.0 {
        return Err(Error::InvalidParams(format!("noise scale {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = match &spec.values {
        Some(v) if v.len() != spec.size => {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: spec.size,
            })
        }
        Some(v) => v.clone(),
        None => {
            let law =
                Normal::new(0.0, spec.value_sd).map_err(|e| Error::InvalidParams(e.to_string()))?;
            (0..spec.size).map(|_| law.sample(&mut rng)).collect()
        }
    };
    let s = raw_importances(&v, spec.noise, &mut rng);
    SlalomParams::new(s, v, spec.gamma)?.normalize()
}

/// Uniform tokens, lengths uniform on `1..=max_len`, labels from `eval(p, ·)`.
pub fn gen_slalom_dataset(
    p: &SlalomParams,
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    p.check()?;
    if n == 0 || max_len == 0 {
        return Err(Error::InvalidParams(
            "n and max_len must be at least 1".into(),
        ));
    }
    let size = p.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let ids: TokenSeq = (0..len).map(|_| rng.random_range(0..size)).collect();
            let f = eval(p, &ids)?;
            Ok(Record {
                label: sample_label(f, &mut rng),
                ids,
                log_odds: Some(f),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(Vocabulary::anonymous(size)?, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentiment_preset_matches_reference() {
        let spec = LinearDatasetSpec::sentiment();
        spec.check().unwrap();
        assert_eq!(spec.vocab.tokens()[4], "good");
        assert_eq!(
            spec.weights,
            vec![0.0, 0.0, 0.0, 0.0, 0.6, 1.0, 1.5, -0.6, -1.0, -1.5]
        );
        assert_eq!(spec.probs[0], Ratio::new(1, 6));
        assert_eq!(spec.probs[7], Ratio::new(1, 15));
        assert_eq!(spec.probs[9], Ratio::new(1, 20));
        let sum: f64 = spec.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn good_bad_log_odds() {
        let spec = LinearDatasetSpec::sentiment();
        let ids = spec.vocab.encode("good bad").unwrap();
        let f = crate::oracle::Oracle::score(&spec.oracle().unwrap(), &ids).unwrap();
        assert!((f - -0.4).abs() < 1e-12);
    }

    #[test]
    fn linear_records_are_consistent() {
        let spec = LinearDatasetSpec::sentiment();
        let ds = gen_linear_dataset(&spec, 500, 1).unwrap();
        for r in &ds.records {
            assert!((1..=30).contains(&r.ids.len()));
            let f: f64 = r.ids.iter().map(|&t| spec.weights[t]).sum();
            assert_eq!(r.log_odds, Some(f));
        }
        assert_eq!(ds, gen_linear_dataset(&spec, 500, 1).unwrap());
        assert_ne!(ds, gen_linear_dataset(&spec, 500, 2).unwrap());
    }

    #[test]
    fn neutral_tokens_give_fair_labels() {
        let mut spec = LinearDatasetSpec::sentiment();
        spec.weights = vec![0.0; 10];
        let ds = gen_linear_dataset(&spec, 20_000, 4).unwrap();
        let rate = ds.records.iter().map(|r| r.label as f64).sum::<f64>() / 20_000.0;
        assert!((rate - 0.5).abs() < 0.015);
    }

    #[test]
    fn bad_probabilities_rejected() {
        let mut spec = LinearDatasetSpec::sentiment();
        spec.probs[0] = Ratio::new(1, 5);
        assert!(gen_linear_dataset(&spec, 1, 0).is_err());
    }

    #[test]
    fn label_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_label(f64::INFINITY, &mut rng) == 1));
        assert!((0..1000).all(|_| sample_label(f64::NEG_INFINITY, &mut rng) == 0));
        let rate = (0..100_000)
            .map(|_| sample_label(0.0, &mut rng) as f64)
            .sum::<f64>()
            / 1e5;
        assert!((rate - 0.5).abs() < 0.01);
    }

    #[test]
    fn importance_law() {
        assert!((importance_from_value(0.04) - 0.04).abs() < 1e-15);
        assert!((importance_from_value(-0.04) + 0.04).abs() < 1e-15);
        let spec = SlalomDatasetSpec {
            noise: 0.0,
            ..SlalomDatasetSpec::with_values(vec![0.0; 5])
        };
        let p = gen_slalom_params(&spec, 3).unwrap();
        assert!(p.s.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn importance_tracks_value_curve() {
        let spec = SlalomDatasetSpec::new(200);
        let p = gen_slalom_params(&spec, 11).unwrap();
        let curve: Vec<f64> = p.v.iter().map(|&v| importance_from_value(v)).collect();
        let r = pearson(&p.s, &curve);
        assert!(r > 0.9, "correlation {r}");
        assert!((p.s.iter().sum::<f64>()).abs() < 1e-9);
        assert_eq!(p, gen_slalom_params(&spec, 11).unwrap());
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn constant_values_give_constant_log_odds() {
        let p = SlalomParams::new(vec![0.3, -0.1, -0.2], vec![0.7; 3], 0.0).unwrap();
        let ds = gen_slalom_dataset(&p, 200, 30, 5).unwrap();
        assert!(ds
            .records
            .iter()
            .all(|r| (r.log_odds.unwrap() - 0.7).abs() < 1e-12));
        assert!(ds.records.iter().all(|r| (1..=30).contains(&r.ids.len())));
    }
}
