//! Tokenization, sentences, vocabularies and search-keyword extraction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<mask>"];
pub const N_SPECIALS: u32 = SPECIALS.len() as u32;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lowercases, NFC-normalizes, splits on whitespace and separates every
/// punctuation character into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().flat_map(char::to_lowercase).nfc().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in normalized.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(core::mem::take(&mut current));
            }
        } else if is_word_char(c) {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(core::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// True when the token has no alphanumeric character.
pub fn is_punctuation(token: &str) -> bool {
    !token.chars().any(is_word_char)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    id: u64,
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: u64, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSentence { id, reason: "no tokens".into() });
        }
        if let Some(bad) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::InvalidSentence { id, reason: format!("malformed token {bad:?}") });
        }
        Ok(Self { id, tokens })
    }

    pub fn from_text(id: u64, text: &str) -> Result<Self> {
        Self::new(id, tokenize(text))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Sentence,
    pub tgt: Sentence,
}

impl SentencePair {
    pub fn new(src: Sentence, tgt: Sentence) -> Result<Self> {
        if src.id != tgt.id {
            return Err(Error::InvalidSentence {
                id: src.id,
                reason: format!("target id {} differs from source id", tgt.id),
            });
        }
        Ok(Self { src, tgt })
    }

    pub fn id(&self) -> u64 {
        self.src.id
    }
}

/// Dense token ids with the five specials at `0..5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::InvalidVocabulary("specials missing or out of order".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .cloned()
                    .ok_or(Error::UnknownId { id, size: self.tokens.len() })
            })
            .collect()
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIALS
    }
}

/// Tokens with frequency `>= min_freq`, ordered by descending frequency then
/// lexicographically, after the specials.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let min_freq = min_freq.max(1);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0usize;
    for s in corpus {
        n += 1;
        for t in &s.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && !SPECIALS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Document frequencies over a corpus, for keyword ranking.
#[derive(Debug, Clone, Default)]
pub struct IdfTable {
    n_docs: usize,
    df: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn from_corpus<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut table = Self::default();
        for s in corpus {
            table.n_docs += 1;
            let distinct: BTreeSet<&str> = s.tokens.iter().map(String::as_str).collect();
            for t in distinct {
                *table.df.entry(t.to_string()).or_default() += 1;
            }
        }
        table
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        libm::log((1 + self.n_docs) as f64 / (1 + df) as f64) + 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    pub sentence_id: u64,
    pub keywords: Vec<String>,
}

impl KeywordSet {
    /// Set when every token was filtered out.
    pub fn is_flagged(&self) -> bool {
        self.keywords.is_empty()
    }
}

pub fn extract_keywords(
    sentence: &Sentence,
    stopwords: &BTreeSet<String>,
    idf: &IdfTable,
    max_k: usize,
) -> Result<KeywordSet> {
    if max_k == 0 {
        return Err(Error::InvalidArgument("max_k must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    let mut candidates: Vec<(usize, &str, f64)> = Vec::new();
    for t in &sentence.tokens {
        if stopwords.contains(t) || is_punctuation(t) || !seen.insert(t.as_str()) {
            continue;
        }
        candidates.push((candidates.len(), t.as_str(), idf.idf(t)));
    }
    // stable: equal IDF keeps sentence order
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let keywords = candidates.into_iter().take(max_k).map(|(_, t, _)| t.to_string()).collect();
    Ok(KeywordSet { sentence_id: sentence.id, keywords })
}

/// Parses a one-token-per-line list; blank lines are skipped.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .flat_map(tokenize)
        .collect()
}
