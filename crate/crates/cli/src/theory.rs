use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use slalom_core::datagen::{gen_slalom_params, SlalomDatasetSpec};
use slalom_core::microformer::{
    build_slalom_transformer, constancy_demo, Activation, FfnKind, MicroformerParams, Mode,
};
use slalom_core::model::eval;
use slalom_core::oracle::{make_linear_oracle, LinearModelParams, SlalomOracle};
use slalom_core::recovery::recover;

use crate::meta::{to_json_line, Meta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Report {
    Text,
    Json,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    /// Random transformers in the constancy check.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Longest same-token sequence.
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Random sequences in the construction check.
    #[arg(long, default_value_t = 1000)]
    pub sequences: usize,
    /// Vocabulary size of the recovery check.
    #[arg(long, default_value_t = 50)]
    pub recover_vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Report::Text)]
    pub report: Report,
}

#[derive(Debug, Serialize)]
struct Suite {
    name: &'static str,
    passed: bool,
    /// Worst observed deviation.
    worst: f64,
    tolerance: f64,
    detail: String,
    seconds: f64,
}

pub fn verify(a: &VerifyArgs) -> Result<ExitCode> {
    let meta = Meta::new("verify-theory", Some(a.seed), a)?;
    let suites = vec![constancy(a)?, construction(a)?, recovery(a)?];
    let ok = suites.iter().all(|s| s.passed);
    match a.report {
        Report::Json => print!(
            "{}",
            to_json_line(&json!({ "passed": ok, "suites": suites, "meta": meta }))?
        ),
        Report::Text => {
            print!("{}", meta.csv_header());
            for s in &suites {
                println!(
                    "{} {:<12} worst={:.3e} tol={:.0e} {:.2}s  {}",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.worst,
                    s.tolerance,
                    s.seconds,
                    s.detail
                );
            }
        }
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Same-token sequences give the same output at every length, for random
/// transformers; a linear model drifts by its weight per token.
fn constancy(a: &VerifyArgs) -> Result<Suite> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let heads = [1, 2, 4];
    let mut worst = 0.0f64;
    for i in 0..a.draws {
        let mode = if i % 2 == 0 {
            Mode::Encoder
        } else {
            Mode::Decoder
        };
        let ffn = FfnKind::Mlp {
            hidden: 16,
            activation: Activation::Gelu,
        };
        let m: MicroformerParams =
            MicroformerParams::random(&mut rng, 10, 8, 4, heads[i % 3], mode, ffn);
        let tok = rng.random_range(0..10);
        let r = constancy_demo(&m, tok, a.max_len)?;
        let scale = r.outputs.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
        worst = worst.max(r.spread / scale);
    }
    let w = 1.5;
    let lin = make_linear_oracle(LinearModelParams::new(vec![w, -0.6], 0.0)?);
    let control = constancy_demo(&lin, 0, a.max_len)?;
    let expected = (a.max_len - 1) as f64 * w;
    let control_ok = (control.spread - expected).abs() <= 1e-12 * expected;
    Ok(Suite {
        name: "constancy",
        passed: worst < 1e-9 && control_ok,
        worst,
        tolerance: 1e-9,
        detail: format!(
            "{} transformers, lengths 1..{}; linear control spread {} (expected {expected})",
            a.draws, a.max_len, control.spread
        ),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The built transformer reproduces the analytic model.
fn construction(a: &VerifyArgs) -> Result<Suite> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
    let p = gen_slalom_params(&SlalomDatasetSpec::new(20), rng.random())?;
    let m = build_slalom_transformer(&p, 4, 3)?;
    let mut worst = 0.0f64;
    for _ in 0..a.sequences {
        let len = rng.random_range(1..=30);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..20)).collect();
        worst = worst.max((m.forward(&seq)? - eval(&p, &seq)?).abs());
    }
    Ok(Suite {
        name: "construction",
        passed: worst < 1e-9,
        worst,
        tolerance: 1e-9,
        detail: format!("{} sequences over 20 tokens", a.sequences),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Exact recovery from 2|V| - 1 queries.
fn recovery(a: &VerifyArgs) -> Result<Suite> {
    let start = Instant::now();
    let n = a.recover_vocab;
    let p = gen_slalom_params(&SlalomDatasetSpec::new(n), a.seed.wrapping_add(2))?;
    let rep = recover(&SlalomOracle(p.clone()), n, 0.0)?;
    let worst =
        p.s.iter()
            .zip(&rep.params.s)
            .chain(p.v.iter().zip(&rep.params.v))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
    let expected_queries = 2 * n as u64 - 1;
    Ok(Suite {
        name: "recovery",
        passed: worst < 1e-9 && rep.query_count == expected_queries,
        worst,
        tolerance: 1e-9,
        detail: format!(
            "|V|={n}, {} queries (expected {expected_queries})",
            rep.query_count
        ),
        seconds: start.elapsed().as_secs_f64(),
    })
}
