//! Text infilling: fill an arbitrary number of blanks, each of unknown
//! length, in a token template.
//!
//! The crate bundles the whole pipeline:
//!
//! * [`tensor`], [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`vocab`], [`template`]: tokens, templates with `__m__` blanks, and the
//!   fill/update/reconstruct lifecycle.
//! * [`position`]: segment-aware `(seg_id, offset_id)` positions.
//! * [`transformer`], [`seq2seq`]: the self-attention infilling decoder and
//!   the attentional LSTM baseline, both behind [`model::InfillModel`].
//! * [`data`], [`synth`]: corpus ingestion, masking strategies, batching, and
//!   a synthetic corpus generator.
//! * [`train`], [`checkpoint`]: Adam, warmup schedule, training loop,
//!   binary checkpoints.
//! * [`infer`], [`bleu`]: blank filling, perplexity, BLEU, evaluation.
//! * [`config`], [`cli`]: layered run configuration and the command line.

pub mod autodiff;
pub mod bleu;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod params;
pub mod position;
pub mod seq2seq;
pub mod synth;
pub mod template;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
