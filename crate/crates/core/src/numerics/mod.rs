//! Dense f32 tensors, tape-based reverse-mode autodiff, AdamW, and
//! learning-rate schedules.
//!
//! The computation record is rebuilt on every forward pass (define-by-run);
//! gradients are summed into per-parameter buffers and must be explicitly
//! zeroed by the training loop, so a joint objective can backward twice
//! before one optimizer step.

mod adamw;
mod gradcheck;
mod scalar;
mod schedule;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamHyper, AdamW};
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use schedule::{lr_at, LrSchedule, ScheduleKind};
pub use tape::{AttnMask, Tape, Var};
pub use tensor::{Params, Tensor};
