//! Labeled sequence datasets and their NDJSON encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{validate_sequence, TokenSeq, Vocabulary};

/// One NDJSON line: `{"ids":[...],"label":0|1,"log_odds":x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub ids: TokenSeq,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_odds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub vocab: Vocabulary,
    pub records: Vec<Record>,
}

impl LabeledDataset {
    pub fn new(vocab: Vocabulary, records: Vec<Record>) -> Result<Self> {
        let ds = Self { vocab, records };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            check_record(r).map_err(|e| Error::InvalidDataset(format!("record {i}: {e}")))?;
            validate_sequence(self.vocab.len(), &r.ids, usize::MAX)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_ndjson<W: Write>(&self, mut writer: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut writer, r)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(vocab: Vocabulary, reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidDataset(format!("line {}: {e}", lineno + 1)))?;
            records.push(r);
        }
        Self::new(vocab, records)
    }
}

fn check_record(r: &Record) -> std::result::Result<(), String> {
    if r.label > 1 {
        return Err(format!("label {} not in {{0,1}}", r.label));
    }
    if matches!(r.log_odds, Some(x) if !x.is_finite()) {
        return Err("non-finite log odds".into());
    }
    Ok(())
}
