//! The toy reasoning model: a decoder-only transformer over patch-embedded
//! image tokens and template text, generating structured
//! `<thinking>…</thinking><answer>[box]</answer>` completions and exposing
//! hidden states at appended context-query slots.

use super::vocab::Vocab;
use crate::numerics::{AttnMask, Params, Scalar, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::synthworld::Image;
use crate::{LensError, Result};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Embedding dim C.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    /// Image patch side in pixels.
    pub patch: usize,
    pub max_prompt: usize,
    pub max_completion: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            max_seq: 256,
            patch: 4,
            max_prompt: 160,
            max_completion: 96,
        }
    }
}

/// System prompt prepended to every input.
pub const SYSTEM_PROMPT: [&str; 4] = ["<bos>", "reason", "then", "answer"];

/// Tokenized prompt: system tokens, instruction tokens, image patches, in
/// that order at contiguous offsets (the generate(p_sys, T, I) order; with
/// a causal mask it lets every image token see what it is looking for).
#[derive(Debug, Clone)]
pub struct PromptLayout {
    pub sys_ids: Vec<u32>,
    pub instr_ids: Vec<u32>,
    /// n_img rows of patch*patch*3 floats.
    pub patches: Vec<f32>,
    pub n_img: usize,
    pub patch_dim: usize,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.sys_ids.len() + self.instr_ids.len() + self.n_img
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instr_offset(&self) -> usize {
        self.sys_ids.len()
    }

    pub fn image_offset(&self) -> usize {
        self.sys_ids.len() + self.instr_ids.len()
    }
}

/// A generated token sequence (prompt excluded) with the per-token
/// log-probabilities of the realized tokens under the generating policy at
/// temperature 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f32>,
    pub text: String,
}

/// Frozen per-layer attention keys/values of one [prompt ∥ completion]
/// prefix; see [`PolicyModel::prefix_kv`].
#[derive(Debug, Clone)]
pub struct PrefixKv {
    pub seq_len: usize,
    /// One (keys, values) pair per layer, each seq_len × dim row-major.
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl PrefixKv {
    pub fn byte_size(&self) -> usize {
        self.layers.iter().map(|(k, v)| 4 * (k.len() + v.len())).sum()
    }
}

/// Flatten non-overlapping patches row-major; within a patch, pixels
/// row-major with channels last.
pub fn image_to_patches(img: &Image, patch: usize) -> Result<(Vec<f32>, usize, usize)> {
    if img.width % patch != 0 || img.height % patch != 0 {
        return Err(LensError::InvalidArgument(format!(
            "image {}x{} not divisible by patch {patch}",
            img.width, img.height
        )));
    }
    let (gw, gh) = (img.width / patch, img.height / patch);
    let patch_dim = patch * patch * 3;
    let mut out = Vec::with_capacity(gw * gh * patch_dim);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let x = px * patch + dx;
                    let y = py * patch + dy;
                    let base = (y * img.width + x) * 3;
                    out.extend_from_slice(&img.data[base..base + 3]);
                }
            }
        }
    }
    Ok((out, gw * gh, patch_dim))
}

pub struct PolicyModel {
    pub cfg: PolicyConfig,
    pub vocab: Vocab,
}

impl PolicyModel {
    pub fn new(cfg: PolicyConfig) -> Self {
        Self {
            cfg,
            vocab: Vocab::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Create all policy parameters under the `policy/` prefix.
    pub fn init_params(&self, params: &mut Params, rng: &mut Rng) {
        let c = self.cfg.dim;
        let v = self.vocab.len();
        let patch_dim = self.cfg.patch * self.cfg.patch * 3;
        let std = 0.02;
        params.insert("policy/tok_emb", Tensor::randn(&[v, c], std, rng));
        // positions and patch content start an order of magnitude above the
        // weight std: the box-prediction task reads both from step one
        params.insert(
            "policy/pos_emb",
            Tensor::randn(&[self.cfg.max_seq, c], 0.1, rng),
        );
        params.insert("policy/patch_w", Tensor::randn(&[patch_dim, c], 0.1, rng));
        params.insert("policy/patch_b", Tensor::zeros(&[c]));
        for l in 0..self.cfg.layers {
            let p = |name: &str| format!("policy/l{l}/{name}");
            params.insert(&p("ln1_g"), Tensor::full(&[c], 1.0));
            params.insert(&p("ln1_b"), Tensor::zeros(&[c]));
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&p(w), Tensor::randn(&[c, c], std, rng));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(&p(b), Tensor::zeros(&[c]));
            }
            params.insert(&p("ln2_g"), Tensor::full(&[c], 1.0));
            params.insert(&p("ln2_b"), Tensor::zeros(&[c]));
            params.insert(&p("mlp_w1"), Tensor::randn(&[c, 4 * c], std, rng));
            params.insert(&p("mlp_b1"), Tensor::zeros(&[4 * c]));
            params.insert(&p("mlp_w2"), Tensor::randn(&[4 * c, c], std, rng));
            params.insert(&p("mlp_b2"), Tensor::zeros(&[c]));
        }
        params.insert("policy/lnf_g", Tensor::full(&[c], 1.0));
        params.insert("policy/lnf_b", Tensor::zeros(&[c]));
        params.insert("policy/lm_w", Tensor::randn(&[c, v], std, rng));
        params.insert("policy/lm_b", Tensor::zeros(&[v]));
    }

    /// Build the prompt for (image, instruction words).
    pub fn layout(&self, img: &Image, instruction: &[String]) -> Result<PromptLayout> {
        let sys_ids = self
            .vocab
            .tokenize(&SYSTEM_PROMPT.map(String::from))
            .expect("system prompt in vocab");
        let instr_ids = self.vocab.tokenize(instruction)?;
        let (patches, n_img, patch_dim) = image_to_patches(img, self.cfg.patch)?;
        let layout = PromptLayout {
            sys_ids,
            instr_ids,
            patches,
            n_img,
            patch_dim,
        };
        if layout.len() > self.cfg.max_prompt {
            return Err(LensError::LengthOverflow {
                context: "prompt",
                len: layout.len(),
                limit: self.cfg.max_prompt,
            });
        }
        Ok(layout)
    }

    fn check_lengths(&self, layout: &PromptLayout, completion: usize, queries: usize) -> Result<()> {
        if completion > self.cfg.max_completion {
            return Err(LensError::LengthOverflow {
                context: "completion",
                len: completion,
                limit: self.cfg.max_completion,
            });
        }
        let total = layout.len() + completion + if queries > 0 { queries + 1 } else { 0 };
        if total > self.cfg.max_seq {
            return Err(LensError::LengthOverflow {
                context: "context window",
                len: total,
                limit: self.cfg.max_seq,
            });
        }
        Ok(())
    }

    /// Transformer trunk: embeds [p_sys ∥ image ∥ instruction ∥ completion],
    /// optionally appends `queries` (an M×C var, all sharing position id
    /// `len`), and returns final-layer (post-norm) hidden states.
    pub fn forward_hidden<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
        queries: Option<Var>,
    ) -> Result<Var> {
        self.forward_hidden_capture(tape, params, layout, completion, queries, None)
    }

    fn forward_hidden_capture<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
        queries: Option<Var>,
        capture_kv: Option<&mut Vec<(Vec<f32>, Vec<f32>)>>,
    ) -> Result<Var> {
        Ok(self
            .forward_hidden_full(tape, params, layout, completion, queries, capture_kv)?
            .0)
    }

    /// Full trunk forward that also exposes the residual stream entering
    /// the last block — the content the final attention layer can read.
    pub fn forward_hidden_full<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
        queries: Option<Var>,
        mut capture_kv: Option<&mut Vec<(Vec<f32>, Vec<f32>)>>,
    ) -> Result<(Var, Var)> {
        let c = self.cfg.dim;
        self.check_lengths(layout, completion.len(), queries.map_or(0, |q| tape.rows(q)))?;
        let tok_emb = tape.param("policy/tok_emb", params.get("policy/tok_emb"));
        let pos_emb = tape.param("policy/pos_emb", params.get("policy/pos_emb"));
        let patch_w = tape.param("policy/patch_w", params.get("policy/patch_w"));
        let patch_b = tape.param("policy/patch_b", params.get("policy/patch_b"));

        let sys = tape.gather_rows(tok_emb, &layout.sys_ids);
        let mut parts = vec![sys];
        if !layout.instr_ids.is_empty() {
            parts.push(tape.gather_rows(tok_emb, &layout.instr_ids));
        }
        let img_px = tape.constant_f32(layout.n_img, layout.patch_dim, &layout.patches);
        let img = tape.matmul(img_px, patch_w);
        let img = tape.add_row(img, patch_b);
        parts.push(img);
        if !completion.is_empty() {
            parts.push(tape.gather_rows(tok_emb, completion));
        }
        let x = tape.concat_rows(&parts);
        let seq_len = tape.rows(x);
        let pos_ids: Vec<u32> = (0..seq_len as u32).collect();
        let pos = tape.gather_rows(pos_emb, &pos_ids);
        let mut x = tape.add(x, pos);

        let mask = if let Some(q) = queries {
            // all query slots share one position id: the sequence end
            let qpos = tape.gather_rows(pos_emb, &[seq_len as u32]);
            let q_embedded = tape.add_row(q, qpos);
            x = tape.concat_rows(&[x, q_embedded]);
            AttnMask::PrefixQuery { prefix: seq_len }
        } else {
            AttnMask::Causal
        };

        let heads = self.cfg.heads;
        let hd = c / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut pre_last = x;
        for l in 0..self.cfg.layers {
            if l + 1 == self.cfg.layers {
                pre_last = x;
            }
            let p = |name: &str| format!("policy/l{l}/{name}");
            let ln1_g = tape.param(&p("ln1_g"), params.get(&p("ln1_g")));
            let ln1_b = tape.param(&p("ln1_b"), params.get(&p("ln1_b")));
            let xn = tape.layer_norm(x, ln1_g, ln1_b);
            let wq = tape.param(&p("wq"), params.get(&p("wq")));
            let wk = tape.param(&p("wk"), params.get(&p("wk")));
            let wv = tape.param(&p("wv"), params.get(&p("wv")));
            let wo = tape.param(&p("wo"), params.get(&p("wo")));
            let bq = tape.param(&p("bq"), params.get(&p("bq")));
            let bk = tape.param(&p("bk"), params.get(&p("bk")));
            let bv = tape.param(&p("bv"), params.get(&p("bv")));
            let bo = tape.param(&p("bo"), params.get(&p("bo")));
            let q = tape.matmul(xn, wq);
            let q = tape.add_row(q, bq);
            let k = tape.matmul(xn, wk);
            let k = tape.add_row(k, bk);
            let v = tape.matmul(xn, wv);
            let v = tape.add_row(v, bv);
            if let Some(cap) = capture_kv.as_deref_mut() {
                let kv = (
                    tape.value(k).iter().map(|x| x.to_f32()).collect(),
                    tape.value(v).iter().map(|x| x.to_f32()).collect(),
                );
                cap.push(kv);
            }
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * hd, (h + 1) * hd);
                let qh = tape.col_slice(q, c0, c1);
                let kh = tape.col_slice(k, c0, c1);
                let vh = tape.col_slice(v, c0, c1);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let probs = tape.masked_softmax(scores, mask);
                head_outs.push(tape.matmul(probs, vh));
            }
            let merged = tape.concat_cols(&head_outs);
            let proj = tape.matmul(merged, wo);
            let proj = tape.add_row(proj, bo);
            x = tape.add(x, proj);

            let ln2_g = tape.param(&p("ln2_g"), params.get(&p("ln2_g")));
            let ln2_b = tape.param(&p("ln2_b"), params.get(&p("ln2_b")));
            let xn = tape.layer_norm(x, ln2_g, ln2_b);
            let w1 = tape.param(&p("mlp_w1"), params.get(&p("mlp_w1")));
            let b1 = tape.param(&p("mlp_b1"), params.get(&p("mlp_b1")));
            let w2 = tape.param(&p("mlp_w2"), params.get(&p("mlp_w2")));
            let b2 = tape.param(&p("mlp_b2"), params.get(&p("mlp_b2")));
            let hmid = tape.matmul(xn, w1);
            let hmid = tape.add_row(hmid, b1);
            let hmid = tape.hard_swish(hmid);
            let out = tape.matmul(hmid, w2);
            let out = tape.add_row(out, b2);
            x = tape.add(x, out);
        }
        let lnf_g = tape.param("policy/lnf_g", params.get("policy/lnf_g"));
        let lnf_b = tape.param("policy/lnf_b", params.get("policy/lnf_b"));
        Ok((tape.layer_norm(x, lnf_g, lnf_b), pre_last))
    }

    /// Log-softmax over the vocabulary at the hidden rows that predict each
    /// completion token (teacher forcing): row `prompt_len-1+t` scores
    /// completion token t.
    pub(crate) fn completion_log_softmax<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        hidden: Var,
        prompt_len: usize,
        completion_len: usize,
    ) -> Var {
        let rows = tape.row_slice(hidden, prompt_len - 1, prompt_len - 1 + completion_len);
        let lm_w = tape.param("policy/lm_w", params.get("policy/lm_w"));
        let lm_b = tape.param("policy/lm_b", params.get("policy/lm_b"));
        let logits = tape.matmul(rows, lm_w);
        let logits = tape.add_row(logits, lm_b);
        tape.row_log_softmax(logits)
    }

    /// Teacher-forced per-token log-probabilities of `completion` given the
    /// prompt; differentiable w.r.t. the policy parameters. Returns a
    /// [T, 1] column.
    pub fn forward_logprobs_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
    ) -> Result<Var> {
        assert!(!completion.is_empty(), "empty completion");
        let hidden = self.forward_hidden(tape, params, layout, completion, None)?;
        let ls = self.completion_log_softmax(tape, params, hidden, layout.len(), completion.len());
        Ok(tape.pick_per_row(ls, completion))
    }

    /// Non-differentiable convenience wrapper returning plain floats.
    pub fn forward_logprobs(
        &self,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
    ) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let v = self.forward_logprobs_var(&mut tape, params, layout, completion)?;
        Ok(tape.value(v).to_vec())
    }

    /// One fused differentiable pass for the RL update: teacher-forced
    /// completion logprobs plus the hidden states at the M appended query
    /// slots (Q'). Causality makes the completion scores identical whether
    /// or not the queries are appended.
    pub fn score_and_extract<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
        queries: Var,
    ) -> Result<(Var, Var)> {
        assert!(!completion.is_empty(), "empty completion");
        let m = tape.rows(queries);
        let hidden = self.forward_hidden(tape, params, layout, completion, Some(queries))?;
        let prefix = layout.len() + completion.len();
        let ls = self.completion_log_softmax(tape, params, hidden, layout.len(), completion.len());
        let picked = tape.pick_per_row(ls, completion);
        let q_hidden = tape.row_slice(hidden, prefix, prefix + m);
        Ok((picked, q_hidden))
    }

    /// Hidden states at the M query slots after one forward pass over
    /// [prompt ∥ completion ∥ Q]; differentiable w.r.t. Q and the policy.
    pub fn extract_context<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
        queries: Var,
    ) -> Result<Var> {
        let m = tape.rows(queries);
        let hidden = self.forward_hidden(tape, params, layout, completion, Some(queries))?;
        let prefix = layout.len() + completion.len();
        Ok(tape.row_slice(hidden, prefix, prefix + m))
    }

    /// Per-layer prefix keys/values over [prompt ∥ completion], for
    /// repeated query extraction against a frozen policy. The query rows'
    /// computation only touches the prefix through these attention inputs,
    /// so [`Self::extract_context_from_kv`] reproduces
    /// [`Self::extract_context`] bit-exactly while skipping the prefix
    /// forward on every call.
    pub fn prefix_kv(
        &self,
        params: &Params,
        layout: &PromptLayout,
        completion: &[u32],
    ) -> Result<PrefixKv> {
        let mut layers = Vec::with_capacity(self.cfg.layers);
        let mut tape = Tape::<f32>::new();
        self.forward_hidden_capture(
            &mut tape,
            params,
            layout,
            completion,
            None,
            Some(&mut layers),
        )?;
        Ok(PrefixKv {
            seq_len: layout.len() + completion.len(),
            layers,
        })
    }

    /// Q' from cached prefix keys/values. Only valid while the policy is
    /// frozen (the cache is injected as constants, so no gradient reaches
    /// policy parameters through the prefix).
    pub fn extract_context_from_kv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        kv: &PrefixKv,
        queries: Var,
    ) -> Result<Var> {
        let c = self.cfg.dim;
        let m = tape.rows(queries);
        let seq_len = kv.seq_len;
        if seq_len + m + 1 > self.cfg.max_seq {
            return Err(LensError::LengthOverflow {
                context: "context window",
                len: seq_len + m + 1,
                limit: self.cfg.max_seq,
            });
        }
        let pos_emb = tape.param("policy/pos_emb", params.get("policy/pos_emb"));
        let qpos = tape.gather_rows(pos_emb, &[seq_len as u32]);
        let mut x = tape.add_row(queries, qpos);
        let heads = self.cfg.heads;
        let hd = c / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mask = AttnMask::QueryRows { prefix: seq_len };
        for l in 0..self.cfg.layers {
            let p = |name: &str| format!("policy/l{l}/{name}");
            let ln1_g = tape.param(&p("ln1_g"), params.get(&p("ln1_g")));
            let ln1_b = tape.param(&p("ln1_b"), params.get(&p("ln1_b")));
            let xn = tape.layer_norm(x, ln1_g, ln1_b);
            let wq = tape.param(&p("wq"), params.get(&p("wq")));
            let wk = tape.param(&p("wk"), params.get(&p("wk")));
            let wv = tape.param(&p("wv"), params.get(&p("wv")));
            let wo = tape.param(&p("wo"), params.get(&p("wo")));
            let bq = tape.param(&p("bq"), params.get(&p("bq")));
            let bk = tape.param(&p("bk"), params.get(&p("bk")));
            let bv = tape.param(&p("bv"), params.get(&p("bv")));
            let bo = tape.param(&p("bo"), params.get(&p("bo")));
            let q = tape.matmul(xn, wq);
            let q = tape.add_row(q, bq);
            let kq = tape.matmul(xn, wk);
            let kq = tape.add_row(kq, bk);
            let vq = tape.matmul(xn, wv);
            let vq = tape.add_row(vq, bv);
            let k_prefix = tape.constant_f32(seq_len, c, &kv.layers[l].0);
            let v_prefix = tape.constant_f32(seq_len, c, &kv.layers[l].1);
            let k_all = tape.concat_rows(&[k_prefix, kq]);
            let v_all = tape.concat_rows(&[v_prefix, vq]);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * hd, (h + 1) * hd);
                let qh = tape.col_slice(q, c0, c1);
                let kh = tape.col_slice(k_all, c0, c1);
                let vh = tape.col_slice(v_all, c0, c1);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let probs = tape.masked_softmax(scores, mask);
                head_outs.push(tape.matmul(probs, vh));
            }
            let merged = tape.concat_cols(&head_outs);
            let proj = tape.matmul(merged, wo);
            let proj = tape.add_row(proj, bo);
            x = tape.add(x, proj);

            let ln2_g = tape.param(&p("ln2_g"), params.get(&p("ln2_g")));
            let ln2_b = tape.param(&p("ln2_b"), params.get(&p("ln2_b")));
            let xn = tape.layer_norm(x, ln2_g, ln2_b);
            let w1 = tape.param(&p("mlp_w1"), params.get(&p("mlp_w1")));
            let b1 = tape.param(&p("mlp_b1"), params.get(&p("mlp_b1")));
            let w2 = tape.param(&p("mlp_w2"), params.get(&p("mlp_w2")));
            let b2 = tape.param(&p("mlp_b2"), params.get(&p("mlp_b2")));
            let hmid = tape.matmul(xn, w1);
            let hmid = tape.add_row(hmid, b1);
            let hmid = tape.hard_swish(hmid);
            let out = tape.matmul(hmid, w2);
            let out = tape.add_row(out, b2);
            x = tape.add(x, out);
        }
        let lnf_g = tape.param("policy/lnf_g", params.get("policy/lnf_g"));
        let lnf_b = tape.param("policy/lnf_b", params.get("policy/lnf_b"));
        Ok(tape.layer_norm(x, lnf_g, lnf_b))
    }

    /// Mean token-level cross-entropy of the teacher-forced target.
    pub fn bootstrap_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params,
        layout: &PromptLayout,
        target: &[u32],
    ) -> Result<Var> {
        let picked = self.forward_logprobs_var(tape, params, layout, target)?;
        let mean = tape.mean(picked);
        Ok(tape.scale(mean, -1.0))
    }

    /// Autoregressive sampling. Temperature 0 is greedy argmax and consumes
    /// no randomness; otherwise tokens are drawn from softmax(logits/T).
    /// Recorded logprobs are always the temperature-1 log-probabilities of
    /// the realized tokens.
    pub fn generate(
        &self,
        params: &Params,
        layout: &PromptLayout,
        temperature: f64,
        max_new: usize,
        rng: &mut Rng,
    ) -> Result<Completion> {
        let max_new = max_new.min(self.cfg.max_completion);
        let mut tokens: Vec<u32> = Vec::with_capacity(max_new);
        let mut logprobs: Vec<f32> = Vec::with_capacity(max_new);
        let eos = self.vocab.eos();
        while tokens.len() < max_new {
            let mut tape = Tape::<f32>::new();
            let hidden = self.forward_hidden(&mut tape, params, layout, &tokens, None)?;
            let last = tape.rows(hidden) - 1;
            let row = tape.row_slice(hidden, last, last + 1);
            let lm_w = tape.param("policy/lm_w", params.get("policy/lm_w"));
            let lm_b = tape.param("policy/lm_b", params.get("policy/lm_b"));
            let logits = tape.matmul(row, lm_w);
            let logits = tape.add_row(logits, lm_b);
            let ls = tape.row_log_softmax(logits);
            let logits_row = tape.value(logits);
            let next = if temperature == 0.0 {
                argmax(logits_row)
            } else {
                sample_from_logits(logits_row, temperature, rng)
            };
            logprobs.push(tape.value(ls)[next]);
            tokens.push(next as u32);
            if next as u32 == eos {
                break;
            }
        }
        let text = self.vocab.detokenize(&tokens)?;
        Ok(Completion {
            tokens,
            logprobs,
            text,
        })
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF sampling from softmax(logits / temperature), accumulated in
/// f64 for a stable cut point.
fn sample_from_logits(logits: &[f32], temperature: f64, rng: &mut Rng) -> usize {
    let mx = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&z| ((z as f64 - mx) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.next_f64() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Ideal completion token sequence for a sample: the reasoning body wrapped
/// in thinking tags, then the box inside answer tags, then the end marker.
pub fn completion_target_tokens(cot: &[String], gt_box: [i64; 4]) -> Vec<String> {
    let mut t: Vec<String> = vec!["<thinking>".into()];
    t.extend(cot.iter().cloned());
    t.push("</thinking>".into());
    t.push("<answer>".into());
    t.push("[".into());
    for (i, coord) in gt_box.iter().enumerate() {
        if i > 0 {
            t.push(",".into());
        }
        for d in coord.to_string().chars() {
            t.push(d.to_string());
        }
    }
    t.push("]".into());
    t.push("</answer>".into());
    t.push("<eos>".into());
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{build_split, render, WorldConfig};

    fn tiny_cfg() -> PolicyConfig {
        PolicyConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            max_seq: 160,
            patch: 8,
            max_prompt: 80,
            max_completion: 48,
        }
    }

    fn setup(seed: u64) -> (PolicyModel, Params, PromptLayout) {
        let model = PolicyModel::new(tiny_cfg());
        let mut params = Params::new();
        let mut rng = Rng::new(seed);
        model.init_params(&mut params, &mut rng);
        let cfg = WorldConfig::default();
        let samples = build_split(&cfg, seed, "train", 1).unwrap();
        let img = render(&samples[0].scene);
        let layout = model.layout(&img, &samples[0].expression).unwrap();
        (model, params, layout)
    }

    #[test]
    fn image_token_count_matches_grid() {
        let model = PolicyModel::new(PolicyConfig::default());
        let cfg = WorldConfig::default();
        let samples = build_split(&cfg, 1, "train", 1).unwrap();
        let img = render(&samples[0].scene);
        let layout = model.layout(&img, &samples[0].expression).unwrap();
        assert_eq!(layout.n_img, 64); // 32/4 * 32/4
        assert_eq!(layout.patch_dim, 48);
    }

    #[test]
    fn softmax_normalizes_at_every_position() {
        let (model, params, layout) = setup(3);
        let completion = vec![model.vocab.id("<thinking>").unwrap(), model.vocab.id("target").unwrap()];
        let mut tape = Tape::<f32>::new();
        let hidden = model
            .forward_hidden(&mut tape, &params, &layout, &completion, None)
            .unwrap();
        let ls = model.completion_log_softmax(&mut tape, &params, hidden, layout.len(), 2);
        for row in tape.value(ls).chunks_exact(model.vocab.len()) {
            let s: f32 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5, "sums to {s}");
        }
    }

    #[test]
    fn zero_weights_give_uniform_logprobs() {
        let (model, mut params, layout) = setup(4);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let completion = vec![model.vocab.eos()];
        let lp = model.forward_logprobs(&params, &layout, &completion).unwrap();
        let expect = -(model.vocab.len() as f32).ln();
        assert!((lp[0] - expect).abs() < 1e-5, "{} vs {expect}", lp[0]);
    }

    #[test]
    fn sampling_and_scoring_agree() {
        let (model, params, layout) = setup(5);
        let mut rng = Rng::new(99);
        let c = model.generate(&params, &layout, 1.0, 24, &mut rng).unwrap();
        assert!(!c.tokens.is_empty());
        let rescored = model.forward_logprobs(&params, &layout, &c.tokens).unwrap();
        for (a, b) in c.logprobs.iter().zip(&rescored) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn greedy_is_deterministic_and_rng_free() {
        let (model, params, layout) = setup(6);
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(2);
        let a = model.generate(&params, &layout, 0.0, 16, &mut r1).unwrap();
        let b = model.generate(&params, &layout, 0.0, 16, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_rng_state_gives_identical_samples() {
        let (model, params, layout) = setup(7);
        let a = model
            .generate(&params, &layout, 1.0, 16, &mut Rng::new(11))
            .unwrap();
        let b = model
            .generate(&params, &layout, 1.0, 16, &mut Rng::new(11))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causality_later_tokens_do_not_change_earlier_logits() {
        let (model, params, layout) = setup(8);
        let t1 = vec![
            model.vocab.id("<thinking>").unwrap(),
            model.vocab.id("target").unwrap(),
            model.vocab.id("red").unwrap(),
        ];
        let mut t2 = t1.clone();
        t2[2] = model.vocab.id("blue").unwrap();
        let lp1 = model.forward_logprobs(&params, &layout, &t1).unwrap();
        let lp2 = model.forward_logprobs(&params, &layout, &t2).unwrap();
        // positions 0 and 1 are scored from prefixes that agree
        assert_eq!(lp1[0], lp2[0]);
        assert_eq!(lp1[1], lp2[1]);
        assert_ne!(lp1[2], lp2[2]);
    }

    #[test]
    fn query_extraction_shape_and_permutation_equivariance() {
        let (model, params, layout) = setup(9);
        let completion = vec![model.vocab.eos()];
        let m = 6;
        let c = model.cfg.dim;
        let mut rng = Rng::new(17);
        let qdata: Vec<f32> = (0..m * c).map(|_| rng.normal_f32() * 0.02).collect();
        let mut tape = Tape::<f32>::new();
        let q = tape.constant_f32(m, c, &qdata);
        let qp = model
            .extract_context(&mut tape, &params, &layout, &completion, q)
            .unwrap();
        assert_eq!((tape.rows(qp), tape.cols(qp)), (m, c));
        let out = tape.value(qp).to_vec();

        // swap query rows 1 and 4; outputs must swap correspondingly
        let mut swapped = qdata.clone();
        for j in 0..c {
            swapped.swap(c + j, 4 * c + j);
        }
        let mut tape2 = Tape::<f32>::new();
        let q2 = tape2.constant_f32(m, c, &swapped);
        let qp2 = model
            .extract_context(&mut tape2, &params, &layout, &completion, q2)
            .unwrap();
        let out2 = tape2.value(qp2).to_vec();
        for j in 0..c {
            assert!((out[c + j] - out2[4 * c + j]).abs() < 1e-5);
            assert!((out[4 * c + j] - out2[c + j]).abs() < 1e-5);
            assert!((out[j] - out2[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn cached_prefix_extraction_is_bit_identical() {
        let (model, params, layout) = setup(21);
        let c = model.cfg.dim;
        let completion = vec![
            model.vocab.id("target").unwrap(),
            model.vocab.id("is").unwrap(),
            model.vocab.eos(),
        ];
        let mut rng = Rng::new(5);
        let qdata: Vec<f32> = (0..5 * c).map(|_| rng.normal_f32() * 0.02).collect();
        let mut tape = Tape::<f32>::new();
        let q = tape.constant_f32(5, c, &qdata);
        let full = model
            .extract_context(&mut tape, &params, &layout, &completion, q)
            .unwrap();
        let full_vals = tape.value(full).to_vec();
        let kv = model.prefix_kv(&params, &layout, &completion).unwrap();
        let mut tape2 = Tape::<f32>::new();
        let q2 = tape2.constant_f32(5, c, &qdata);
        let cached = model
            .extract_context_from_kv(&mut tape2, &params, &kv, q2)
            .unwrap();
        assert_eq!(full_vals, tape2.value(cached).to_vec());
    }

    #[test]
    fn query_states_depend_on_completion() {
        let (model, params, layout) = setup(10);
        let c = model.cfg.dim;
        let mut rng = Rng::new(18);
        let qdata: Vec<f32> = (0..2 * c).map(|_| rng.normal_f32() * 0.02).collect();
        let mk = |completion: &[u32]| {
            let mut tape = Tape::<f32>::new();
            let q = tape.constant_f32(2, c, &qdata);
            let qp = model
                .extract_context(&mut tape, &params, &layout, completion, q)
                .unwrap();
            tape.value(qp).to_vec()
        };
        let a = mk(&[model.vocab.id("red").unwrap()]);
        let b = mk(&[model.vocab.id("blue").unwrap()]);
        assert_ne!(a, b);
    }

    #[test]
    fn gradient_reaches_queries() {
        let (model, mut params, layout) = setup(11);
        let c = model.cfg.dim;
        let mut rng = Rng::new(19);
        let mut q = Tensor::randn(&[4, c], 0.02, &mut rng);
        q.set_requires_grad(true);
        params.insert("bridge/q", q);
        params.set_trainable(|n| n == "bridge/q");
        let mut tape = Tape::<f32>::new();
        let qv = tape.param("bridge/q", params.get("bridge/q"));
        let completion = vec![model.vocab.eos()];
        let qp = model
            .extract_context(&mut tape, &params, &layout, &completion, qv)
            .unwrap();
        let loss = tape.sum(qp);
        tape.backward(loss).unwrap();
        let g = tape.param_grad("bridge/q").unwrap();
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn bootstrap_loss_is_uniform_log_v_for_zero_model() {
        let (model, mut params, layout) = setup(12);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let target = model
            .vocab
            .tokenize(&completion_target_tokens(
                &["target".into(), "is".into(), "the".into(), "red".into(), "disc".into()],
                [2, 3, 10, 11],
            ))
            .unwrap();
        let mut tape = Tape::<f32>::new();
        let loss = model
            .bootstrap_loss(&mut tape, &params, &layout, &target)
            .unwrap();
        let expect = (model.vocab.len() as f32).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-4);
    }

    #[test]
    fn completion_over_budget_is_rejected() {
        let (model, params, layout) = setup(13);
        let long = vec![model.vocab.eos(); model.cfg.max_completion + 1];
        assert!(model.forward_logprobs(&params, &layout, &long).is_err());
    }

    #[test]
    fn target_tokens_wrap_box_in_answer_tags() {
        let toks = completion_target_tokens(&["target".into()], [2, 3, 10, 11]);
        let s = toks.join(" ");
        assert_eq!(
            s,
            "<thinking> target </thinking> <answer> [ 2 , 3 , 1 0 , 1 1 ] </answer> <eos>"
        );
    }
}
