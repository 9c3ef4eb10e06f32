//! JSON-lines records: keyword sets, matcher pairs, the synthetic answer key
//! and translation details.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ssmmt_core::features::ImageId;
use ssmmt_core::matcher::MatchExample;
use ssmmt_core::retrieval::QuerySet;

use crate::error::{Context, Error, Result};
use crate::io::{read_string, write_atomic};

pub fn write<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("line {}: {e}", i + 1))).at(path))
        .collect()
}

/// `{"id": int, "keywords": [str]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRow {
    pub id: u64,
    pub keywords: Vec<String>,
}

impl From<&QuerySet> for KeywordRow {
    fn from(q: &QuerySet) -> Self {
        Self { id: q.sentence_id, keywords: q.keywords.clone() }
    }
}

impl From<KeywordRow> for QuerySet {
    fn from(r: KeywordRow) -> Self {
        Self { sentence_id: r.id, keywords: r.keywords }
    }
}

/// `{sentence_id, keyword, image_id, label}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub sentence_id: u64,
    pub keyword: String,
    pub image_id: String,
    pub label: u8,
}

impl From<&MatchExample> for PairRow {
    fn from(p: &MatchExample) -> Self {
        Self { sentence_id: p.sentence_id, keyword: p.keyword.clone(), image_id: p.image_id.to_hex(), label: p.label }
    }
}

impl TryFrom<PairRow> for MatchExample {
    type Error = Error;

    fn try_from(r: PairRow) -> Result<Self> {
        if r.label > 1 {
            return Err(Error::data(format!("label {} is not 0 or 1", r.label)));
        }
        Ok(Self { sentence_id: r.sentence_id, keyword: r.keyword, image_id: ImageId::from_hex(&r.image_id)?, label: r.label })
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<MatchExample>> {
    read::<PairRow>(path)?.into_iter().map(|r| MatchExample::try_from(r).at(path)).collect()
}

pub fn write_pairs(path: &Path, pairs: &[MatchExample]) -> Result<()> {
    write(path, &pairs.iter().map(PairRow::from).collect::<Vec<_>>())
}

pub fn read_queries(path: &Path) -> Result<Vec<QuerySet>> {
    Ok(read::<KeywordRow>(path)?.into_iter().map(QuerySet::from).collect())
}

pub fn write_queries(path: &Path, queries: &[QuerySet]) -> Result<()> {
    write(path, &queries.iter().map(KeywordRow::from).collect::<Vec<_>>())
}

/// Per-sentence decoding detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRow {
    pub id: u64,
    pub text: String,
    pub log_prob: f64,
    pub finished: bool,
    pub no_visual: bool,
}
