//! Orchestration: configuration, checkpointing, the staged training
//! pipeline (bootstrap → align → rl), evaluation, and ablation harnesses.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod metrics;
mod stages;

pub use ablate::{cmd_ablate, rows_to_csv, AblationRow};
pub use checkpoint::{Checkpoint, Stage};
pub use config::{
    AblateConfig, AlignConfig, BootstrapConfig, ModelConfig, RlConfig, RunConfig,
};
pub use eval::{cmd_eval, resolve_split, score_predictions, EvalReport, ScoreReport};
pub use metrics::{MetricsLog, SupervisedMetrics};
pub use stages::{
    build_models, cmd_align, cmd_bootstrap, cmd_rl, heldout_split, oracle_prompt, train_split,
    StageArtifacts,
};
