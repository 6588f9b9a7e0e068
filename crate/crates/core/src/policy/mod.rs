//! The toy reasoning model: vocabulary, prompt layout, structured-completion
//! generation, teacher-forced scoring, and context-query extraction.

mod model;
mod vocab;

pub use model::{
    completion_target_tokens, image_to_patches, Completion, PolicyConfig, PolicyModel, PrefixKv,
    PromptLayout, SYSTEM_PROMPT,
};
pub use vocab::{Vocab, ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, THINKING_CLOSE, THINKING_OPEN};
