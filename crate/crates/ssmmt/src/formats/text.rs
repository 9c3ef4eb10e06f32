//! Line-oriented text files: parallel corpora, stopwords, vocabularies and
//! translation outputs.

use std::collections::BTreeSet;
use std::path::Path;

use ssmmt_core::corpus::{parse_stopwords, tokenize, Sentence, SentencePair, Vocabulary};

use crate::error::{Context, Error, Result};
use crate::io::{read_string, write_atomic};

/// The English stopword list shipped with the tool.
pub const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.en.txt");

fn lines(path: &Path) -> Result<Vec<String>> {
    let text = read_string(path)?;
    Ok(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect())
}

/// One sentence per line; the 0-based line index is the sentence id.
pub fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.trim().is_empty() {
                return Err(Error::data(format!("line {}: blank line", i + 1)).at(path));
            }
            Sentence::from_text(i as u64, l).at(path)
        })
        .collect()
}

/// Reads a source/target file pair, line i of one aligned with line i of the other.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<SentencePair>> {
    let s = read_sentences(src)?;
    let t = read_sentences(tgt)?;
    if s.len() != t.len() {
        return Err(Error::data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    if s.is_empty() {
        return Err(Error::data("empty corpus").at(src));
    }
    s.into_iter().zip(t).map(|(a, b)| SentencePair::new(a, b).map_err(Error::from)).collect()
}

pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Tokenized lines, blank lines allowed and read as empty hypotheses.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(lines(path)?.iter().map(|l| tokenize(l)).collect())
}

pub fn read_stopwords(path: Option<&Path>) -> Result<BTreeSet<String>> {
    match path {
        Some(p) => Ok(parse_stopwords(&read_string(p)?)),
        None => Ok(parse_stopwords(DEFAULT_STOPWORDS)),
    }
}

/// One token per line in id order, specials included.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_lines(path, vocab.tokens())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_tokens(lines(path)?).at(path)
}
