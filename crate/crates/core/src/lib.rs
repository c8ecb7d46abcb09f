//! Phrase-aware Transformer translation toolkit.
//!
//! The encoder replaces the queries and keys of every attention head with
//! phrase vectors: each position's query/key pair is summarised by forward
//! and backward LSTMs running over the n-gram window that ends at it.
//! Around that core sit a small reverse-mode tensor engine, a vanilla
//! Transformer decoder, token-batched training with checkpoint averaging,
//! BPE subwords, and a BLEU scorer compatible with `tok.13a` / `tok.zh`.

pub mod attention;
pub mod autodiff;
pub mod bleu;
pub mod bpe;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod lstm;
pub mod model;
pub mod phrase;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use autodiff::{Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use phrase::GramConfig;
pub use tensor::Tensor;
