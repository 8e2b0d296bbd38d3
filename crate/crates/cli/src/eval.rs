use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use slalom_core::metrics::{aopc, fidelity_mse, EmptyInput, PerturbationMode};
use slalom_core::model::{linearized_scores, Linearization};
use slalom_core::{Oracle, TokenSeq};

use crate::commands::{fit_surrogate, read_sequences, HyperArgs, Method, Surrogate};
use crate::meta::{emit, Meta};
use crate::oracles::{load, InputArgs, OracleArgs};

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// NDJSON dataset whose sequences are evaluated instead of --ids/--text.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate at most this many dataset sequences.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
    /// Surrogates to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Method::Fidel, Method::Eff, Method::Linear])]
    pub methods: Vec<Method>,
    /// Largest number of removed tokens for deletion fidelity.
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Random removals per k.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Perturbation-curve length; min(|seq|, 20) when omitted.
    #[arg(long)]
    pub aopc_k: Option<usize>,
    /// Token scored in place of an empty input.
    #[arg(long)]
    pub baseline_token: Option<usize>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Rows of `metric,method,k,value`, averaged over sequences.
#[derive(Default)]
struct Table {
    rows: Vec<(String, String, Option<usize>, f64, usize)>,
}

impl Table {
    fn add(&mut self, metric: &str, method: &str, k: Option<usize>, value: f64) {
        match self
            .rows
            .iter_mut()
            .find(|r| r.0 == metric && r.1 == method && r.2 == k)
        {
            Some(r) => {
                r.3 += value;
                r.4 += 1;
            }
            None => self.rows.push((metric.into(), method.into(), k, value, 1)),
        }
    }

    fn render(&self) -> String {
        let mut out = String::from("metric,method,k,value\n");
        for (metric, method, k, sum, n) in &self.rows {
            let k = k.map_or_else(String::new, |k| k.to_string());
            out.push_str(&format!("{metric},{method},{k},{:?}\n", sum / *n as f64));
        }
        out
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Eff => "slalom-eff",
        Method::Fidel => "slalom-fidel",
        Method::Linear => "linear",
    }
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let meta = Meta::new("eval", Some(a.hyper.seed), a)?;
    let loaded = load(&a.oracle)?;
    let oracle: &dyn Oracle<f64> = &loaded.oracle;
    let seqs: Vec<TokenSeq> = match &a.dataset {
        Some(path) => read_sequences(path)?.into_iter().take(a.limit).collect(),
        None => vec![a.input.resolve(loaded.vocab.as_ref())?],
    };
    let empty = match a.baseline_token {
        Some(t) => EmptyInput::Baseline(t),
        None => EmptyInput::Oracle,
    };

    let mut table = Table::default();
    let mut used = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(a.hyper.seed);
    for (i, seq) in seqs.iter().enumerate() {
        if seq.len() <= a.k_max.max(a.hyper.max_del) {
            eprintln!("skipping sequence {i}: length {} is too short", seq.len());
            continue;
        }
        used += 1;
        let seed = a.hyper.seed.wrapping_add(i as u64);
        let h = HyperArgs {
            seed,
            ..a.hyper.clone()
        };
        let k_aopc = a.aopc_k.unwrap_or(20).min(seq.len());

        let mut random: Vec<f64> = (0..seq.len()).map(|j| j as f64).collect();
        random.shuffle(&mut rng);
        curves(&mut table, oracle, seq, "random", &random, k_aopc, empty)?;

        for &m in &a.methods {
            let name = method_name(m);
            let (ranking, mse) = match fit_surrogate(oracle, seq, m, &h)? {
                Surrogate::Slalom(model) => {
                    let local = model.local_seq(seq)?;
                    let r = linearized_scores(&model.params, &local, Linearization::Proportional)?;
                    (
                        r,
                        fidelity_mse(oracle, &model, seq, a.k_max, a.trials, seed)?,
                    )
                }
                Surrogate::Linear(lin) => {
                    let r = seq.iter().map(|&t| lin.weight(t).unwrap_or(0.0)).collect();
                    (r, fidelity_mse(oracle, &lin, seq, a.k_max, a.trials, seed)?)
                }
            };
            for (k, v) in mse.iter().enumerate() {
                table.add("fidelity_mse", name, Some(k + 1), *v);
            }
            curves(&mut table, oracle, seq, name, &ranking, k_aopc, empty)?;
        }
    }
    if used == 0 {
        bail!("no sequence is longer than --k-max {}", a.k_max);
    }
    let mut csv = meta.csv_header();
    csv.push_str(&table.render());
    emit(a.out.as_deref(), &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn curves(
    table: &mut Table,
    oracle: &dyn Oracle<f64>,
    seq: &[usize],
    method: &str,
    ranking: &[f64],
    k: usize,
    empty: EmptyInput,
) -> Result<()> {
    for (mode, curve_name, area_name) in [
        (
            PerturbationMode::Deletion,
            "deletion_curve",
            "deletion_aopc",
        ),
        (
            PerturbationMode::Insertion,
            "insertion_curve",
            "insertion_aopc",
        ),
    ] {
        let c = aopc(oracle, seq, ranking, k, mode, empty)?;
        for (k, p) in c.ks.iter().zip(&c.scores) {
            table.add(curve_name, method, Some(*k), *p);
        }
        table.add(area_name, method, None, c.aopc);
    }
    Ok(())
}
