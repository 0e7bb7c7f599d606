//! Desk-scale knowledge distillation laboratory for sequence-to-sequence
//! translation.
//!
//! The crate bundles everything needed to compare token-level,
//! sentence-level and gated hybrid distillation on synthetic translation
//! tasks: a small autodiff tensor core, an encoder-decoder transformer,
//! synthetic corpora with a noise pipeline, decoders, an Adam trainer with
//! checkpointing, corpus BLEU, and the experiment harness that produces the
//! comparison tables.

pub mod bleu;
pub mod corpus;
pub mod decode;
pub mod distill;
pub mod harness;
pub mod model;
pub mod noise;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use tensor::TensorError;

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] train::CheckpointError),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.as_ref().display().to_string();
    move |source| Error::Io { path, source }
}
