//! Wire protocol v1: one UTF-8 JSON object per line.
//!
//! ```text
//! -> {"op":"hello","version":1}            <- {"op":"hello","version":1,"classes":N}
//! -> {"op":"score","id":k,"ids":[...]}     <- {"op":"score","id":k,"log_odds":x}
//! -> {"op":"score","id":k,"tokens":[...]}  <- {"op":"score","id":k,"logits":[...]}
//! -> {"op":"shutdown"}                     <- (close)
//!                                          <- {"op":"error","id":k,"message":"..."}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Oracle;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello {
        version: u32,
    },
    Score {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ids: Option<Vec<TokenId>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<String>>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Response {
    Hello {
        version: u32,
        classes: usize,
    },
    Score {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_odds: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logits: Option<Vec<f64>>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

pub fn encode<T: Serialize>(frame: &T) -> Result<String> {
    let mut line = serde_json::to_string(frame)?;
    line.push('\n');
    Ok(line)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub scored: u64,
    pub errors: u64,
}

/// Answers protocol frames from `reader` on `writer` until a shutdown frame or EOF.
///
/// `tokens` requests are resolved through `vocab`; without one they are
/// answered with an error frame. A malformed line never ends the session.
pub fn serve<O, R, W>(
    oracle: &O,
    vocab: Option<&Vocabulary>,
    reader: R,
    mut writer: W,
) -> Result<ServeStats>
where
    O: Oracle<f64> + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut stats = ServeStats::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Hello { version }) if version == PROTOCOL_VERSION => Response::Hello {
                version,
                classes: 2,
            },
            Ok(Request::Hello { version }) => Response::Error {
                id: None,
                message: format!("unsupported protocol version {version}"),
            },
            Ok(Request::Shutdown) => break,
            Ok(Request::Score { id, ids, tokens }) => {
                match resolve(vocab, ids, tokens).and_then(|seq| oracle.score(&seq)) {
                    Ok(x) => {
                        stats.scored += 1;
                        Response::Score {
                            id,
                            log_odds: Some(x),
                            logits: None,
                        }
                    }
                    Err(e) => Response::Error {
                        id: Some(id),
                        message: e.to_string(),
                    },
                }
            }
            Err(e) => Response::Error {
                id: None,
                message: format!("bad frame: {e}"),
            },
        };
        if matches!(reply, Response::Error { .. }) {
            stats.errors += 1;
        }
        writer.write_all(encode(&reply)?.as_bytes())?;
        writer.flush()?;
    }
    Ok(stats)
}

fn resolve(
    vocab: Option<&Vocabulary>,
    ids: Option<Vec<TokenId>>,
    tokens: Option<Vec<String>>,
) -> Result<Vec<TokenId>> {
    match (ids, tokens) {
        (Some(ids), None) => Ok(ids),
        (None, Some(tokens)) => {
            let vocab = vocab
                .ok_or_else(|| Error::Protocol("server has no vocabulary for tokens".into()))?;
            tokens
                .iter()
                .map(|t| {
                    vocab
                        .id(t)
                        .ok_or_else(|| Error::Protocol(format!("unknown token {t:?}")))
                })
                .collect()
        }
        _ => Err(Error::Protocol("exactly one of ids/tokens required".into())),
    }
}
