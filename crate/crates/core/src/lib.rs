//! Algorithmic core for search-image multimodal machine translation.
//!
//! Everything here is pure and allocation-only (`no_std` + `alloc`): text
//! processing and vocabularies, the deterministic fixture search engine, stub
//! image features, a small reverse-mode neural toolkit, the word/image matcher,
//! relevance filtering of visual candidates, the transformer translator and
//! BLEU-based evaluation. File formats, caching, HTTP and the command line live
//! in the `ssmmt` companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod filter;
pub mod fixture;
pub mod matcher;
pub mod nnet;
pub mod retrieval;
pub mod rng;
pub mod translator;

pub use error::{Error, Result};
