//! A small reverse-mode neural toolkit: tensors, a recording graph with the
//! operations used by the matcher and translator, named parameter sets, Adam,
//! the transformer encoder/decoder and finite-difference gradient checks.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use graph::{sigmoid, AttnLayout, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;
pub use transformer::{SeqBatch, Transformer, TransformerConfig, Visual};
