//! On-disk formats for every pipeline artifact.

pub mod binary;
pub mod checkpoint;
pub mod context;
pub mod features;
pub mod jsonl;
pub mod text;
