//! Desk-scale pre-training and fine-tuning of a bidirectional transformer
//! encoder, built from scratch: tape-based reverse-mode autodiff, WordPiece
//! tokenization, masked-token and sentence-pair pre-training data generation,
//! all task heads, an Adam training loop with warmup/decay and bitwise
//! resumable checkpoints, frozen-feature extraction, and ablation harnesses.
//!
//! Everything runs offline on bundled fixtures. Each major capability has a
//! runnable program under `examples/`; the `minibert` binary exposes the same
//! surface as subcommands.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod fixtures;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod optim;
pub mod streams;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Tape, Tensor};
