//! Surrogate parameter containers and the sum normalization of importances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-token importance `s` and value `v` over a vocabulary, with the
/// normalization target `gamma` for `sum(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SlalomParams<T: Scalar = f64> {
    pub s: Vec<T>,
    pub v: Vec<T>,
    #[serde(default)]
    pub gamma: T,
}

impl<T: Scalar> SlalomParams<T> {
    pub fn new(s: Vec<T>, v: Vec<T>, gamma: T) -> Result<Self> {
        let p = Self { s, v, gamma };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if self.s.is_empty() {
            return Err(Error::InvalidParams("empty vocabulary".into()));
        }
        if self.s.len() != self.v.len() {
            return Err(Error::InvalidParams(format!(
                "|s| = {} but |v| = {}",
                self.s.len(),
                self.v.len()
            )));
        }
        if !self.gamma.is_finite() || self.s.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.s.len()
    }

    /// Shifts `s` so that it sums to `gamma`; `v` is untouched.
    pub fn normalize(&self) -> Result<Self> {
        self.check()?;
        Ok(Self {
            s: center(&self.s, self.gamma),
            v: self.v.clone(),
            gamma: self.gamma,
        })
    }

    pub fn with_gamma(&self, gamma: T) -> Result<Self> {
        Self {
            gamma,
            ..self.clone()
        }
        .normalize()
    }

    pub fn cast<U: Scalar>(&self) -> SlalomParams<U> {
        let c = |x: &T| U::lit(x.as_f64());
        SlalomParams {
            s: self.s.iter().map(c).collect(),
            v: self.v.iter().map(c).collect(),
            gamma: c(&self.gamma),
        }
    }
}

/// `s - mean(s) + gamma / |s|`
pub fn center<T: Scalar>(s: &[T], gamma: T) -> Vec<T> {
    let n = T::from_count(s.len());
    let mean = s.iter().copied().sum::<T>() / n;
    let shift = gamma / n - mean;
    s.iter().map(|&x| x + shift).collect()
}

/// Multi-class variant: one importance map shared by all classes and a value
/// map per class, stored as `v[class][token]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MultiClassSlalomParams<T: Scalar = f64> {
    pub s: Vec<T>,
    pub v: Vec<Vec<T>>,
    #[serde(default)]
    pub gamma: T,
}

impl<T: Scalar> MultiClassSlalomParams<T> {
    pub fn new(s: Vec<T>, v: Vec<Vec<T>>, gamma: T) -> Result<Self> {
        let p = Self { s, v, gamma };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if self.s.is_empty() {
            return Err(Error::InvalidParams("empty vocabulary".into()));
        }
        if self.v.len() < 2 {
            return Err(Error::InvalidParams("need at least two classes".into()));
        }
        if let Some(row) = self.v.iter().find(|row| row.len() != self.s.len()) {
            return Err(Error::InvalidParams(format!(
                "value row has {} entries, expected {}",
                row.len(),
                self.s.len()
            )));
        }
        let all = self.s.iter().chain(self.v.iter().flatten());
        if !self.gamma.is_finite() || all.copied().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.v.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.s.len()
    }

    /// Centers `s` to sum to `gamma` and the class values of every token to sum to zero.
    pub fn normalize(&self) -> Result<Self> {
        self.check()?;
        let classes = T::from_count(self.v.len());
        let mut v = self.v.clone();
        for tok in 0..self.s.len() {
            let mean = self.v.iter().map(|row| row[tok]).sum::<T>() / classes;
            for row in &mut v {
                row[tok] = row[tok] - mean;
            }
        }
        Ok(Self {
            s: center(&self.s, self.gamma),
            v,
            gamma: self.gamma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sum(xs: &[f64]) -> f64 {
        xs.iter().sum()
    }

    #[test]
    fn normalize_examples() {
        let p = SlalomParams::new(vec![1.0, 1.0], vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(p.normalize().unwrap().s, vec![0.0, 0.0]);

        let p = SlalomParams::new(vec![2.0, 0.0], vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(p.normalize().unwrap().s, vec![1.0, -1.0]);

        // mean 0.4 removed, 1/3 added
        let p = SlalomParams::new(vec![0.3f64, 0.9, 0.0], vec![1.0, 2.0, 3.0], 1.0).unwrap();
        let n = p.normalize().unwrap();
        let want = [
            0.3 - 0.4 + 1.0 / 3.0,
            0.9 - 0.4 + 1.0 / 3.0,
            -0.4 + 1.0 / 3.0,
        ];
        for (a, b) in n.s.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((n.s[0] - 0.233_333_333_333).abs() < 1e-9);
        assert!((sum(&n.s) - 1.0).abs() < 1e-9);
        assert_eq!(n.v, p.v);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            SlalomParams::new(vec![f64::NAN], vec![0.0], 0.0),
            Err(Error::InvalidParams(_))
        ));
        let p = SlalomParams {
            s: vec![f64::INFINITY, 0.0],
            v: vec![0.0, 0.0],
            gamma: 0.0,
        };
        assert!(p.normalize().is_err());
        assert!(SlalomParams::new(vec![0.0], vec![0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn json_schema() {
        let p = SlalomParams::new(vec![0.5, -0.5], vec![1.0, -1.0], 0.0).unwrap();
        let js = serde_json::to_string(&p).unwrap();
        assert_eq!(js, r#"{"s":[0.5,-0.5],"v":[1.0,-1.0],"gamma":0.0}"#);
        let back: SlalomParams = serde_json::from_str(r#"{"s":[0.5,-0.5],"v":[1,-1]}"#).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn multiclass_normalization() {
        let p = MultiClassSlalomParams::new(
            vec![1.0, 3.0],
            vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0]],
            0.0,
        )
        .unwrap();
        let n = p.normalize().unwrap();
        assert!(sum(&n.s).abs() < 1e-9);
        for tok in 0..2 {
            let col: f64 = n.v.iter().map(|r| r[tok]).sum();
            assert!(col.abs() < 1e-9);
        }
        assert!(MultiClassSlalomParams::new(vec![0.0], vec![vec![0.0]], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_hits_gamma(
            s in prop::collection::vec(-20.0f64..20.0, 1..40),
            gamma in -3.0f64..3.0,
        ) {
            let v = vec![0.0; s.len()];
            let p = SlalomParams::new(s, v, gamma).unwrap();
            let once = p.normalize().unwrap();
            let twice = once.normalize().unwrap();
            prop_assert!((sum(&once.s) - gamma).abs() < 1e-9);
            for (a, b) in once.s.iter().zip(&twice.s) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
