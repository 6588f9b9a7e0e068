//! The reinforcement-learning engine: group rollouts, advantage
//! normalization, the clipped surrogate with k3 KL penalty, the joint
//! objective with the supervised segmentation term, and one full RL step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::Bridge;
use crate::maskhead::{binarize, seg_loss, MaskHead};
use crate::numerics::{AdamHyper, AdamW, Params, Tape};
use crate::policy::{Completion, PolicyModel};
use crate::rewards::{parse_completion, unified_reward, Lambdas, ParsedAnswer, RewardBreakdown};
use crate::rng::{derive_seed, tag, Rng};
use crate::synthworld::{render, Mask, ReferringSample};
use crate::{LensError, Result};

/// RL-stage hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlHyper {
    /// Advantage-normalization epsilon.
    pub delta: f64,
    /// Surrogate clip range.
    pub epsilon: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Segmentation-loss weight in the joint objective.
    pub alpha: f64,
    pub lambdas: Lambdas,
    /// Rollouts per sample (G).
    pub group_size: usize,
    pub inner_epochs: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for RlHyper {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            epsilon: 0.2,
            beta: 0.04,
            alpha: 1.0,
            lambdas: Lambdas::default(),
            group_size: 8,
            inner_epochs: 1,
            temperature: 1.0,
            max_new_tokens: 48,
        }
    }
}

impl RlHyper {
    pub fn validate(&self) -> Result<()> {
        if self.delta <= 0.0 {
            return Err(LensError::Config("delta must be > 0".into()));
        }
        if !(0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(LensError::Config("epsilon must be in (0,1)".into()));
        }
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(LensError::Config("beta and alpha must be >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(LensError::Config("group size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Group-normalized advantages: A_i = (R_i - mean) / (population std + delta).
pub fn compute_advantages(rewards: &[f64], delta: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LensError::InvalidArgument(
            "advantage normalization needs a group of at least 2".into(),
        ));
    }
    if delta <= 0.0 {
        return Err(LensError::InvalidArgument("delta must be > 0".into()));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + delta)).collect())
}

/// The k3 KL estimator for one token: r - ln r - 1 with
/// r = exp(logp_ref - logp_policy). Non-negative, zero iff r == 1.
pub fn kl_k3(logp_ref: f64, logp_policy: f64) -> f64 {
    let d = logp_ref - logp_policy;
    d.exp() - d - 1.0
}

/// Per-token clipped surrogate values:
/// min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) with ratio = exp(new - old).
pub fn clipped_surrogate(
    logp_new: &[f64],
    logp_old: &[f64],
    advantage: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if logp_new.len() != logp_old.len() {
        return Err(LensError::Shape {
            context: "clipped_surrogate",
            expected: format!("{} tokens", logp_old.len()),
            got: format!("{}", logp_new.len()),
        });
    }
    Ok(logp_new
        .iter()
        .zip(logp_old)
        .map(|(&n, &o)| {
            let ratio = (n - o).exp();
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
            (ratio * advantage).min(clipped * advantage)
        })
        .collect())
}

fn token_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The group objective J to MAXIMIZE:
/// (1/G) sum_i [ tokenmean(O_clip^i) - beta * tokenmean(k3^i) ].
pub fn grpo_objective(
    logp_new: &[Vec<f64>],
    logp_old: &[Vec<f64>],
    logp_ref: &[Vec<f64>],
    advantages: &[f64],
    epsilon: f64,
    beta: f64,
) -> Result<f64> {
    let g = advantages.len();
    if logp_new.len() != g || logp_old.len() != g || logp_ref.len() != g {
        return Err(LensError::InvalidArgument(
            "grpo_objective: group arrays disagree in length".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..g {
        let surr = clipped_surrogate(&logp_new[i], &logp_old[i], advantages[i], epsilon)?;
        let kl: Vec<f64> = logp_ref[i]
            .iter()
            .zip(&logp_new[i])
            .map(|(&r, &n)| kl_k3(r, n))
            .collect();
        total += token_mean(&surr) - beta * token_mean(&kl);
    }
    Ok(total / g as f64)
}

/// The joint total loss to MINIMIZE: -J + alpha * mean(seg_losses).
pub fn lens_objective(j: f64, seg_losses: &[f64], alpha: f64) -> f64 {
    let seg_mean = if seg_losses.is_empty() {
        0.0
    } else {
        token_mean(seg_losses)
    };
    -j + alpha * seg_mean
}

/// The model triple the training stages operate on.
pub struct LensModels {
    pub policy: PolicyModel,
    pub bridge: Bridge,
    pub head: MaskHead,
}

/// One scored rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub completion: Completion,
    pub parsed: ParsedAnswer,
    pub reward: RewardBreakdown,
    pub ref_logprobs: Vec<f32>,
    pub pred_mask: Mask,
    pub pred_logits: Vec<f32>,
}

/// The G rollouts of one sample, with their normalized advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub sample_id: usize,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// Step metrics appended to the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: String,
    pub mean_reward: f64,
    pub r_format: f64,
    pub r_box: f64,
    pub r_seg: f64,
    pub kl: f64,
    pub seg_loss: f64,
    pub clip_frac: f64,
    pub lr: f64,
}

/// Greedy/no-grad full pipeline for one (sample, completion): extract the
/// query states, project, decode, binarize. Used by reward scoring and eval.
pub fn predict_mask(
    models: &LensModels,
    params: &Params,
    sample: &ReferringSample,
    completion_tokens: &[u32],
) -> Result<(Mask, Vec<f32>)> {
    predict_mask_cached(models, params, sample, completion_tokens, None)
}

/// Like [`predict_mask`], with an optional precomputed encoder grid (valid
/// while the image encoder is frozen).
pub fn predict_mask_cached(
    models: &LensModels,
    params: &Params,
    sample: &ReferringSample,
    completion_tokens: &[u32],
    grid_values: Option<&[f32]>,
) -> Result<(Mask, Vec<f32>)> {
    let img = render(&sample.scene);
    let layout = models.policy.layout(&img, &sample.expression)?;
    let mut tape = Tape::<f32>::new();
    let q = models.bridge.queries_var(&mut tape, params);
    let qp = models
        .policy
        .extract_context(&mut tape, params, &layout, completion_tokens, q)?;
    let qseg = models.bridge.connect(&mut tape, params, qp);
    let grid = match grid_values {
        Some(vals) => {
            let (gw, gh) = encoder_grid_dims(sample);
            models.head.grid_from_values(&mut tape, gw, gh, vals)
        }
        None => models.head.encode_image(&mut tape, params, &img)?,
    };
    let out = models.head.decode_mask(&mut tape, params, &grid, qseg)?;
    let logits = tape.value(out.logits).to_vec();
    let mask = binarize(&logits, out.width, out.height, 0.0);
    Ok((mask, logits))
}

fn encoder_grid_dims(sample: &ReferringSample) -> (usize, usize) {
    (
        sample.scene.width / crate::maskhead::ENC_PATCH,
        sample.scene.height / crate::maskhead::ENC_PATCH,
    )
}

/// Encoder output values for one sample, for reuse while the encoder is
/// frozen.
pub fn encode_grid_values(
    models: &LensModels,
    params: &Params,
    sample: &ReferringSample,
) -> Result<Vec<f32>> {
    let img = render(&sample.scene);
    let mut tape = Tape::<f32>::new();
    let grid = models.head.encode_image(&mut tape, params, &img)?;
    Ok(tape.value(grid.tokens).to_vec())
}

/// Generate and score one rollout against the pre-update snapshot.
fn roll_one(
    models: &LensModels,
    snapshot: &Params,
    ref_policy: &Params,
    sample: &ReferringSample,
    grid_values: &[f32],
    hyper: &RlHyper,
    seed: u64,
) -> Result<Rollout> {
    let img = render(&sample.scene);
    let layout = models.policy.layout(&img, &sample.expression)?;
    let mut rng = Rng::new(seed);
    let completion = models.policy.generate(
        snapshot,
        &layout,
        hyper.temperature,
        hyper.max_new_tokens,
        &mut rng,
    )?;
    let ref_logprobs = models
        .policy
        .forward_logprobs(ref_policy, &layout, &completion.tokens)?;
    let parsed = parse_completion(&completion.text, sample.scene.width, sample.scene.height);
    let (pred_mask, pred_logits) = predict_mask_cached(
        models,
        snapshot,
        sample,
        &completion.tokens,
        Some(grid_values),
    )?;
    let reward = unified_reward(
        &parsed,
        &pred_mask,
        sample.gt_box,
        &sample.gt_mask,
        hyper.lambdas,
    )?;
    Ok(Rollout {
        completion,
        parsed,
        reward,
        ref_logprobs,
        pred_mask,
        pred_logits,
    })
}

/// One GRPO step over a batch of samples.
///
/// Rollout generation and reward scoring run against a frozen parameter
/// snapshot with per-rollout rng streams derived from
/// (step, sample id, rollout index), so any parallel schedule is
/// bit-identical to the sequential one. The backward/update phase is
/// exclusive and single-threaded.
#[allow(clippy::too_many_arguments)]
pub fn rl_step(
    models: &LensModels,
    params: &mut Params,
    ref_policy: &Params,
    batch: &[ReferringSample],
    hyper: &RlHyper,
    lr: f32,
    opt: &mut AdamW,
    adam: &AdamHyper,
    step: u64,
    seed: u64,
    parallel: bool,
) -> Result<(Vec<RolloutGroup>, StepMetrics)> {
    hyper.validate()?;
    if batch.is_empty() {
        return Err(LensError::InvalidArgument("empty rl batch".into()));
    }
    let snapshot = params.snapshot(|_| true);

    // the encoder is frozen during RL, so each sample's grid is a constant
    let grids: Vec<Vec<f32>> = batch
        .iter()
        .map(|s| encode_grid_values(models, &snapshot, s))
        .collect::<Result<_>>()?;

    // rollout + scoring phase (read-shared snapshot)
    let jobs: Vec<(usize, usize)> = (0..batch.len())
        .flat_map(|s| (0..hyper.group_size).map(move |k| (s, k)))
        .collect();
    let run_job = |&(s, k): &(usize, usize)| -> Result<Rollout> {
        let sample = &batch[s];
        let child = derive_seed(seed, &[tag("rollout"), step, sample.id as u64, k as u64]);
        roll_one(models, &snapshot, ref_policy, sample, &grids[s], hyper, child)
    };
    let rollouts: Vec<Rollout> = if parallel {
        jobs.par_iter().map(run_job).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run_job).collect::<Result<_>>()?
    };

    // advantages per group
    let mut groups: Vec<RolloutGroup> = Vec::with_capacity(batch.len());
    for (s, sample) in batch.iter().enumerate() {
        let rs: Vec<Rollout> = (0..hyper.group_size)
            .map(|k| rollouts[s * hyper.group_size + k].clone())
            .collect();
        let rewards: Vec<f64> = rs.iter().map(|r| r.reward.r_unified).collect();
        let advantages = compute_advantages(&rewards, hyper.delta)?;
        groups.push(RolloutGroup {
            sample_id: sample.id,
            rollouts: rs,
            advantages,
        });
    }

    // exclusive update phase
    let scale = 1.0 / (batch.len() * hyper.group_size) as f64;
    let mut kl_sum = 0.0;
    let mut seg_sum = 0.0;
    let mut clip_hits = 0usize;
    let mut token_count = 0usize;
    for inner in 0..hyper.inner_epochs.max(1) {
        params.zero_grads();
        for (s, group) in groups.iter().enumerate() {
            let sample = &batch[s];
            let img = render(&sample.scene);
            let layout = models.policy.layout(&img, &sample.expression)?;
            let (gw, gh) = encoder_grid_dims(sample);
            for (k, rollout) in group.rollouts.iter().enumerate() {
                let tokens = &rollout.completion.tokens;
                let t_len = tokens.len();
                let mut tape = Tape::<f32>::new();
                let q = models.bridge.queries_var(&mut tape, params);
                let (picked, q_hidden) =
                    models
                        .policy
                        .score_and_extract(&mut tape, params, &layout, tokens, q)?;
                let qseg = models.bridge.connect(&mut tape, params, q_hidden);
                let grid = models.head.grid_from_values(&mut tape, gw, gh, &grids[s]);
                let out = models.head.decode_mask(&mut tape, params, &grid, qseg)?;
                let segl = seg_loss(&mut tape, &out, &sample.gt_mask)?;

                let old: Vec<f32> = rollout.completion.logprobs.clone();
                let old_c = tape.constant_f32(t_len, 1, &old);
                let ref_c = tape.constant_f32(t_len, 1, &rollout.ref_logprobs);
                let dlog = tape.sub(picked, old_c);
                let ratio = tape.exp(dlog);
                let adv = group.advantages[k];
                let unclipped = tape.scale(ratio, adv);
                let clipped = tape.clamp(ratio, 1.0 - hyper.epsilon, 1.0 + hyper.epsilon);
                let clipped = tape.scale(clipped, adv);
                let obj = tape.min(unclipped, clipped);
                let surr_mean = tape.mean(obj);
                let d = tape.sub(ref_c, picked);
                let ekl = tape.exp(d);
                let k3 = tape.sub(ekl, d);
                let k3 = tape.add_scalar(k3, -1.0);
                let kl_mean = tape.mean(k3);
                let kl_term = tape.scale(kl_mean, hyper.beta);
                let j_term = tape.sub(surr_mean, kl_term);
                let neg_j = tape.scale(j_term, -1.0);
                let seg_term = tape.scale(segl, hyper.alpha);
                let total = tape.add(neg_j, seg_term);
                let total = tape.scale(total, scale);
                tape.backward(total)?;
                tape.apply_param_grads(params);

                if inner == 0 {
                    kl_sum += tape.scalar(kl_mean) as f64;
                    seg_sum += tape.scalar(segl) as f64;
                    for &r in tape.value(ratio) {
                        if r < 1.0 - hyper.epsilon as f32 || r > 1.0 + hyper.epsilon as f32 {
                            clip_hits += 1;
                        }
                    }
                    token_count += t_len;
                }
            }
        }
        #[cfg(debug_assertions)]
        let frozen_hash = params.hash_subset(|n| !params_trainable(params, n));
        params.assert_all_finite("params before adamw")?;
        opt.step(params, lr, adam)?;
        params.assert_all_finite("params after adamw")?;
        #[cfg(debug_assertions)]
        debug_assert_eq!(
            frozen_hash,
            params.hash_subset(|n| !params_trainable(params, n)),
            "frozen parameters drifted during an optimizer step"
        );
    }
    params.zero_grads();

    let n = (batch.len() * hyper.group_size) as f64;
    let all: Vec<&Rollout> = groups.iter().flat_map(|g| g.rollouts.iter()).collect();
    let metrics = StepMetrics {
        step,
        stage: "rl".into(),
        mean_reward: all.iter().map(|r| r.reward.r_unified).sum::<f64>() / n,
        r_format: all.iter().map(|r| r.reward.r_format).sum::<f64>() / n,
        r_box: all.iter().map(|r| r.reward.r_box).sum::<f64>() / n,
        r_seg: all.iter().map(|r| r.reward.r_seg).sum::<f64>() / n,
        kl: kl_sum / n,
        seg_loss: seg_sum / n,
        clip_frac: if token_count == 0 {
            0.0
        } else {
            clip_hits as f64 / token_count as f64
        },
        lr: lr as f64,
    };
    Ok((groups, metrics))
}

fn params_trainable(params: &Params, name: &str) -> bool {
    params.try_get(name).map(|t| t.requires_grad()).unwrap_or(false)
}
