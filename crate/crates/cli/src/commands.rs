use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;
use slalom_core::datagen::{
    gen_linear_dataset, gen_slalom_dataset, gen_slalom_params, LinearDatasetSpec, SlalomDatasetSpec,
};
use slalom_core::fitting::{
    fit_eff, fit_fidel, fit_linear_surrogate, sample_pool_eff, sample_pool_fidel, EffHyper,
    FidelHyper, FittedSlalom, LinearSurrogate,
};
use slalom_core::model::{
    linearized_scores, shapley_exact, shapley_sampled, Linearization, MAX_EXACT_SHAPLEY,
};
use slalom_core::oracle::protocol;
use slalom_core::recovery::recover as recover_params;
use slalom_core::{Oracle, TokenSeq, Vocabulary};

use crate::meta::{emit, sidecar, to_json_line, Meta};
use crate::oracles::{load, token_name, InputArgs, OracleArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Linear,
    Slalom,
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Number of records.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset path; sidecars are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary size of the slalom preset.
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    /// Longest sequence of the slalom preset.
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Scale of the importance noise of the slalom preset.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// JSON array of token values for the slalom preset, replacing the default normal draw.
    #[arg(long)]
    pub values: Option<PathBuf>,
}

pub fn gen_data(a: &GenDataArgs) -> Result<ExitCode> {
    let meta = Meta::new("gen-data", Some(a.seed), a)?;
    let (dataset, params) = match a.preset {
        Preset::Linear => (
            gen_linear_dataset(&LinearDatasetSpec::sentiment(), a.n, a.seed)?,
            None,
        ),
        Preset::Slalom => {
            let mut spec = match &a.values {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    SlalomDatasetSpec::with_values(serde_json::from_str(&text)?)
                }
                None => SlalomDatasetSpec::new(a.vocab_size),
            };
            spec.noise = a.noise;
            spec.max_len = a.max_len;
            // separate streams for the parameters and the records
            let p = gen_slalom_params(&spec, a.seed)?;
            let ds = gen_slalom_dataset(&p, a.n, a.max_len, a.seed.wrapping_add(1))?;
            (ds, Some(p))
        }
    };
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    dataset.write_ndjson(&mut w)?;
    w.flush()?;

    let mut vocab_file = Vec::new();
    dataset.vocab.write(&mut vocab_file)?;
    fs::write(sidecar(&a.out, ".vocab"), vocab_file)?;
    let info = json!({
        "meta": meta,
        "preset": a.preset,
        "records": dataset.len(),
        "vocab_size": dataset.vocab.len(),
    });
    fs::write(sidecar(&a.out, ".meta.json"), to_json_line(&info)?)?;
    if let Some(p) = params {
        let out = json!({ "s": p.s, "v": p.v, "gamma": p.gamma, "meta": meta });
        fs::write(sidecar(&a.out, ".params.json"), to_json_line(&out)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug, Serialize)]
pub struct RecoverArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Vocabulary size; taken from the oracle or vocabulary file when omitted.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Target sum of the recovered importances.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn recover(a: &RecoverArgs) -> Result<ExitCode> {
    let meta = Meta::new("recover", None, a)?;
    let loaded = load(&a.oracle)?;
    let Some(n) = a.vocab_size.or(loaded.vocab_size()) else {
        bail!("the vocabulary size is unknown; pass --vocab-size or --vocab");
    };
    let rep = recover_params(&loaded.oracle, n, a.gamma)?;
    let out = json!({
        "s": rep.params.s,
        "v": rep.params.v,
        "gamma": rep.params.gamma,
        "queries": rep.query_count,
        "reference_token": rep.reference_token,
        "secondary_reference": rep.secondary_reference,
        "saturated": rep.saturated,
        "meta": meta,
    });
    emit(a.out.as_deref(), &to_json_line(&out)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eff,
    Fidel,
    Linear,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct HyperArgs {
    /// Pool size b; 5000 for eff and 2000 for fidel when omitted.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Random-sequence length n (eff).
    #[arg(long, default_value_t = 2)]
    pub rand_len: usize,
    /// Most deletions K per perturbed copy (fidel, linear).
    #[arg(long, default_value_t = 5)]
    pub max_del: usize,
    /// SGD steps c (eff).
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Learning rate (eff).
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Minibatch size r (eff).
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Alternating iterations (fidel).
    #[arg(long, default_value_t = 10)]
    pub outer_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl HyperArgs {
    pub fn eff(&self) -> EffHyper {
        EffHyper {
            seq_len: self.rand_len,
            pool_size: self.samples.unwrap_or(5000),
            batch_size: self.batch,
            learning_rate: self.lr,
            steps: self.steps,
            ..EffHyper::default()
        }
    }

    pub fn fidel(&self) -> FidelHyper {
        FidelHyper {
            max_deletions: self.max_del,
            pool_size: self.samples.unwrap_or(2000),
            outer_iters: self.outer_iters,
            ..FidelHyper::default()
        }
    }
}

pub enum Surrogate {
    Slalom(FittedSlalom),
    Linear(LinearSurrogate),
}

/// Samples a pool around `seq` and fits `method` to it. The pool uses
/// `seed`, the SGD minibatch order `seed + 1`.
pub fn fit_surrogate(
    oracle: &dyn Oracle<f64>,
    seq: &[usize],
    method: Method,
    h: &HyperArgs,
) -> Result<Surrogate> {
    Ok(match method {
        Method::Eff => {
            let eh = h.eff();
            let pool = sample_pool_eff(oracle, seq, &eh, h.seed)?;
            Surrogate::Slalom(fit_eff(&pool, &eh, h.seed.wrapping_add(1))?.model)
        }
        Method::Fidel => {
            let fh = h.fidel();
            let pool = sample_pool_fidel(oracle, seq, &fh, h.seed)?;
            Surrogate::Slalom(fit_fidel(&pool, &fh)?.model)
        }
        Method::Linear => {
            let pool = sample_pool_fidel(oracle, seq, &h.fidel(), h.seed)?;
            Surrogate::Linear(fit_linear_surrogate(&pool)?)
        }
    })
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = Method::Fidel)]
    pub method: Method,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn fit(a: &FitArgs) -> Result<ExitCode> {
    let meta = Meta::new("fit", Some(a.hyper.seed), a)?;
    let loaded = load(&a.oracle)?;
    let seq = a.input.resolve(loaded.vocab.as_ref())?;
    let out = match fit_surrogate(&loaded.oracle, &seq, a.method, &a.hyper)? {
        Surrogate::Slalom(m) => json!({
            "tokens": m.tokens,
            "s": m.params.s,
            "v": m.params.v,
            "gamma": m.params.gamma,
            "method": a.method,
            "meta": meta,
        }),
        Surrogate::Linear(l) => json!({
            "tokens": l.tokens,
            "weights": l.weights,
            "offset": l.offset,
            "rank_deficient": l.rank_deficient,
            "residual_mse": l.residual_mse,
            "method": a.method,
            "meta": meta,
        }),
    };
    emit(a.out.as_deref(), &to_json_line(&out)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = Method::Eff)]
    pub method: Method,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Report the exact soft-removal gradient instead of v * exp(s).
    #[arg(long)]
    pub exact_gradient: bool,
    /// Add a Shapley column; exact up to 20 tokens, sampled beyond.
    #[arg(long)]
    pub shapley: bool,
    /// Permutations of the sampled Shapley estimate.
    #[arg(long, default_value_t = 20000)]
    pub shapley_samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn explain(a: &ExplainArgs) -> Result<ExitCode> {
    if a.method == Method::Linear {
        bail!("explain supports --method eff or fidel");
    }
    let meta = Meta::new("explain", Some(a.hyper.seed), a)?;
    let loaded = load(&a.oracle)?;
    let seq = a.input.resolve(loaded.vocab.as_ref())?;
    let Surrogate::Slalom(model) = fit_surrogate(&loaded.oracle, &seq, a.method, &a.hyper)? else {
        unreachable!("slalom methods yield slalom surrogates");
    };
    let mode = if a.exact_gradient {
        Linearization::ExactGradient
    } else {
        Linearization::Proportional
    };
    let local = model.local_seq(&seq)?;
    let lin = linearized_scores(&model.params, &local, mode)?;

    let shapley = if !a.shapley {
        None
    } else if local.len() <= MAX_EXACT_SHAPLEY {
        Some(shapley_exact(&model.params, &local)?)
    } else {
        Some(shapley_sampled(
            &model.params,
            &local,
            a.shapley_samples,
            a.hyper.seed,
        )?)
    };

    let mut csv = meta.csv_header();
    csv.push_str("position,token,value_v,importance_s,linearized");
    csv.push_str(if shapley.is_some() {
        ",shapley\n"
    } else {
        "\n"
    });
    for (i, (&t, &j)) in seq.iter().zip(&local).enumerate() {
        let name = token_name(loaded.vocab.as_ref(), t);
        csv.push_str(&format!(
            "{i},{},{:?},{:?},{:?}",
            csv_field(&name),
            model.params.v[j],
            model.params.s[j],
            lin[i]
        ));
        match &shapley {
            Some(phi) => csv.push_str(&format!(",{:?}\n", phi[i])),
            None => csv.push('\n'),
        }
    }
    emit(a.out.as_deref(), &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// TCP address to listen on; stdin/stdout when omitted.
    #[arg(long)]
    pub listen: Option<String>,
    /// With --listen, exit after the first connection closes.
    #[arg(long)]
    pub once: bool,
}

pub fn serve(a: &ServeArgs) -> Result<ExitCode> {
    let loaded = load(&a.oracle)?;
    let vocab: Option<&Vocabulary> = loaded.vocab.as_ref();
    match &a.listen {
        None => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            protocol::serve(&loaded.oracle, vocab, stdin, stdout)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = BufReader::new(stream.try_clone()?);
                if let Err(e) = protocol::serve(&loaded.oracle, vocab, reader, stream) {
                    eprintln!("connection ended: {e}");
                }
                if a.once {
                    break;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Sequences of a dataset file, one NDJSON record per line.
pub fn read_sequences(path: &std::path::Path) -> Result<Vec<TokenSeq>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let r: slalom_core::Record = serde_json::from_str(l)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?;
            Ok(r.ids)
        })
        .collect()
}
