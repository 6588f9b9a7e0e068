//! lens-core: a desk-scale referring-segmentation training stack.
//!
//! The crate wires five pieces together:
//!
//! 1. [`numerics`] — a dense f32 tensor type with tape-based reverse-mode
//!    autodiff, AdamW, and learning-rate schedules.
//! 2. [`synthworld`] — a deterministic generator of synthetic scenes with
//!    templated referring expressions, ground-truth boxes and masks.
//! 3. [`policy`] + [`bridge`] + [`maskhead`] — the model: a small decoder-only
//!    transformer that emits `<thinking>…</thinking><answer>[box]</answer>`
//!    completions, learned context queries with a connector projecting into
//!    prompt space, and a prompt-conditioned mask decoder.
//! 4. [`rewards`] — completion parsing, format/box/segment rewards and the
//!    gIoU/cIoU metrics.
//! 5. [`grpo`] + [`pipeline`] — the group-relative RL engine and the staged
//!    training pipeline (bootstrap → align → rl) with checkpointing,
//!    evaluation, and ablation harnesses.

pub mod bridge;
pub mod grpo;
pub mod maskhead;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod synthworld;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum LensError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),
    #[error("sequence of length {len} exceeds limit {limit} ({context})")]
    LengthOverflow {
        context: &'static str,
        len: usize,
        limit: usize,
    },
    #[error("scene placement failed after {0} attempts")]
    Placement(usize),
    #[error("no uniquely identifiable shape in scene (seed {0})")]
    NoUniqueTarget(u64),
    #[error("dataset error at line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stage order violation: {0}")]
    StageOrder(String),
    #[error("freeze contract violated: {0}")]
    FreezeViolation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LensError>;
