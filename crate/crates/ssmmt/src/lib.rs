//! File formats, the retrieval cache, the HTTP search adapter, run
//! configuration and the pipeline stages behind the `ssmmt` command line.

pub mod cache;
pub mod config;
pub mod error;
pub mod formats;
pub mod http;
pub mod io;
pub mod pipeline;

pub use error::{Error, Kind, Result};

/// Version line printed by `--version`.
pub fn version_line() -> String {
    format!("ssmmt {} (checkpoint format {})", env!("CARGO_PKG_VERSION"), formats::checkpoint::VERSION)
}
