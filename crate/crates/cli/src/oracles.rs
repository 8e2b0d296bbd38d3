use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use slalom_core::datagen::LinearDatasetSpec;
use slalom_core::microformer::WithClsToken;
use slalom_core::oracle::{
    make_linear_oracle, Endpoint, ExternalOptions, ExternalOracle, LinearModelParams,
};
use slalom_core::{
    FittedSlalom, MicroformerParams, Oracle, SlalomOracle, SlalomParams, TokenSeq, Vocabulary,
};

#[derive(Args, Debug, Clone, Serialize)]
pub struct OracleArgs {
    /// slalom:FILE, linear:FILE, microformer:FILE, sentiment, exec:COMMAND or tcp:HOST:PORT
    #[arg(long)]
    pub oracle: String,
    /// Vocabulary file with one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Send token strings rather than ids to external oracles.
    #[arg(long)]
    pub wire_tokens: bool,
    /// Per-request timeout for external oracles.
    #[arg(long, env = "SLALOM_ORACLE_TIMEOUT_MS", default_value_t = 30_000)]
    #[serde(skip)]
    pub timeout_ms: u64,
    /// Reserved token a microformer always sees at its classified position.
    #[arg(long)]
    pub cls_token: Option<usize>,
}

pub struct LoadedOracle {
    pub oracle: Box<dyn Oracle<f64>>,
    pub vocab: Option<Vocabulary>,
}

impl LoadedOracle {
    pub fn vocab_size(&self) -> Option<usize> {
        self.oracle
            .vocab_size()
            .or(self.vocab.as_ref().map(Vocabulary::len))
    }
}

/// Parameter file schema shared by `recover` and `fit`; `tokens` maps local
/// indices to global ids when present.
#[derive(Debug, Deserialize)]
struct SlalomFile {
    s: Vec<f64>,
    v: Vec<f64>,
    #[serde(default)]
    gamma: f64,
    #[serde(default)]
    tokens: Option<Vec<usize>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &str) -> Result<T> {
    let file = fs::File::open(path).with_context(|| format!("opening {path}"))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {path}"))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Vocabulary::read(BufReader::new(file))?)
}

pub fn load(args: &OracleArgs) -> Result<LoadedOracle> {
    let mut vocab = args.vocab.as_deref().map(read_vocab).transpose()?;
    let spec = args.oracle.as_str();
    let oracle: Box<dyn Oracle<f64>> = if spec == "sentiment" {
        let t6 = LinearDatasetSpec::sentiment();
        vocab.get_or_insert(t6.vocab.clone());
        Box::new(t6.oracle()?)
    } else if let Some(path) = spec.strip_prefix("slalom:") {
        let f: SlalomFile = read_json(path)?;
        let params = SlalomParams::new(f.s, f.v, f.gamma)?;
        match f.tokens {
            Some(tokens) => Box::new(FittedSlalom::new(tokens, params)?),
            None => Box::new(SlalomOracle(params)),
        }
    } else if let Some(path) = spec.strip_prefix("linear:") {
        let p: LinearModelParams = read_json(path)?;
        Box::new(make_linear_oracle(LinearModelParams::new(p.w, p.b)?))
    } else if let Some(path) = spec.strip_prefix("microformer:") {
        let m: MicroformerParams = read_json(path)?;
        m.check()?;
        match args.cls_token {
            Some(cls) => Box::new(WithClsToken::new(m, cls)?),
            None => Box::new(m),
        }
    } else if spec.starts_with("exec:") || spec.starts_with("tcp:") {
        let endpoint: Endpoint = spec.parse()?;
        let opts = ExternalOptions {
            timeout: Duration::from_millis(args.timeout_ms),
            vocab: if args.wire_tokens {
                match &vocab {
                    Some(v) => Some(v.clone()),
                    None => bail!("--wire-tokens needs --vocab"),
                }
            } else {
                None
            },
        };
        Box::new(ExternalOracle::connect(&endpoint, opts)?)
    } else {
        bail!("unrecognized oracle {spec:?}");
    };
    if let (Some(v), Some(n)) = (&vocab, oracle.vocab_size()) {
        if v.len() != n {
            bail!(
                "vocabulary has {} tokens but the oracle expects {n}",
                v.len()
            );
        }
    }
    Ok(LoadedOracle { oracle, vocab })
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct InputArgs {
    /// Token ids separated by spaces or commas.
    #[arg(long, conflicts_with = "text")]
    pub ids: Option<String>,
    /// Whitespace-tokenized text; needs a vocabulary.
    #[arg(long)]
    pub text: Option<String>,
}

impl InputArgs {
    pub fn resolve(&self, vocab: Option<&Vocabulary>) -> Result<TokenSeq> {
        let seq = match (&self.ids, &self.text) {
            (Some(ids), _) => parse_ids(ids)?,
            (None, Some(text)) => match vocab {
                Some(v) => v.encode(text)?,
                None => bail!("--text needs a vocabulary (--vocab, or the sentiment oracle)"),
            },
            (None, None) => bail!("pass the sequence with --ids or --text"),
        };
        if seq.is_empty() {
            bail!("the input sequence is empty");
        }
        Ok(seq)
    }
}

pub fn parse_ids(s: &str) -> Result<TokenSeq> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .with_context(|| format!("bad token id {t:?}"))
        })
        .collect()
}

pub fn token_name(vocab: Option<&Vocabulary>, id: usize) -> String {
    vocab
        .and_then(|v| v.token(id))
        .map_or_else(|| id.to_string(), str::to_string)
}
