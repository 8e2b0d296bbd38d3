//! Token vocabularies and integer token sequences.
//!
//! The math kernels only ever see token ids; strings are resolved here at the
//! I/O boundary.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Ordered list of distinct token strings; the position of a token is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidParams(
                "vocabulary must hold at least one token".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidParams(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of placeholder tokens `t0 .. t{n-1}`.
    pub fn anonymous(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("t{i}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenization against this vocabulary.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidParams(format!("unknown token {w:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq::from)
    }

    /// Reads one token per line; the line number is the id.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let tok = line.trim_end_matches('\r');
            if tok.is_empty() {
                continue;
            }
            tokens.push(tok.to_string());
        }
        Self::new(tokens)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(writer, "{tok}")?;
        }
        Ok(())
    }
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// Distinct ids in order of first occurrence.
    pub fn unique(&self) -> Vec<TokenId> {
        unique_tokens(&self.0)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn unique_tokens(seq: &[TokenId]) -> Vec<TokenId> {
    let mut seen = std::collections::HashSet::with_capacity(seq.len());
    seq.iter().copied().filter(|t| seen.insert(*t)).collect()
}

/// Checks that every id lies in `0..vocab_size` and that the length is at most `context`.
pub fn validate_sequence(vocab_size: usize, seq: &[TokenId], context: usize) -> Result<()> {
    if let Some(&id) = seq.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::OutOfVocab {
            id,
            size: vocab_size,
        });
    }
    if seq.len() > context {
        return Err(Error::TooLong {
            len: seq.len(),
            max: context,
        });
    }
    Ok(())
}
