//! The three training stages and their freeze contracts.
//!
//! Stage 0 (`cmd_bootstrap`) gives the policy its template language and the
//! mask head an oracle-prompted segmentation ability — the stand-in for the
//! pretrained backbones the full-scale recipe starts from. Stage 1
//! (`cmd_align`) trains only the context queries and connector against the
//! segmentation loss, with both backbones frozen. Stage 2 (`cmd_rl`) runs
//! group-relative policy optimization with the unified rewards plus the
//! supervised segmentation term, keeping only the segmentation image
//! encoder frozen.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Stage};
use super::config::RunConfig;
use super::metrics::{MetricsLog, SupervisedMetrics};
use crate::bridge::Bridge;
use crate::grpo::{encode_grid_values, rl_step, LensModels, RlHyper};
use crate::maskhead::{seg_loss, MaskHead};
use crate::numerics::{AdamHyper, AdamW, LrSchedule, Params, Scalar, Tape, Tensor, Var};
use crate::policy::{completion_target_tokens, PolicyModel};
use crate::rng::{derive_seed, tag, Rng};
use crate::synthworld::{build_split, render, ReferringSample};
use crate::{LensError, Result};

pub fn build_models(cfg: &RunConfig) -> LensModels {
    LensModels {
        policy: PolicyModel::new(cfg.policy_config()),
        bridge: Bridge::new(cfg.bridge_config()),
        head: MaskHead::new(cfg.maskhead_config()),
    }
}

pub fn train_split(cfg: &RunConfig) -> Result<Vec<ReferringSample>> {
    build_split(&cfg.world, cfg.seed, "train", cfg.world.train_size)
}

pub fn heldout_split(cfg: &RunConfig) -> Result<Vec<ReferringSample>> {
    build_split(&cfg.world, cfg.seed, "heldout", cfg.world.heldout_size)
}

/// Perturb a box by up to 3px per corner (probability 0.7), keeping it
/// valid and inside the image. The decoder trained on jittered prompts
/// learns to segment the shape near the box instead of the literal box
/// region, which is what lets coarse learned prompts drive it later.
fn jitter_box(b: [i64; 4], width: usize, height: usize, rng: &mut Rng) -> [i64; 4] {
    if rng.next_f64() < 0.3 {
        return b;
    }
    let mut out = b;
    for (i, v) in out.iter_mut().enumerate() {
        let lim = if i % 2 == 0 { width } else { height } as i64;
        *v = (*v + rng.range_inclusive(0, 6) as i64 - 3).clamp(0, lim);
    }
    if out[0] >= out[2] || out[1] >= out[3] {
        return b;
    }
    out
}

/// Box corners normalized to [0,1], linearly embedded into the prompt dim
/// and replicated across all M prompt slots. The bootstrap stage trains the
/// mask head against these oracle prompts.
pub fn oracle_prompt<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params,
    gt_box: [i64; 4],
    width: usize,
    height: usize,
    slots: usize,
) -> Var {
    let norm = [
        gt_box[0] as f32 / width as f32,
        gt_box[1] as f32 / height as f32,
        gt_box[2] as f32 / width as f32,
        gt_box[3] as f32 / height as f32,
    ];
    let tiled: Vec<f32> = norm.iter().copied().cycle().take(4 * slots).collect();
    let x = tape.constant_f32(slots, 4, &tiled);
    let w = tape.param("oracle/w", params.get("oracle/w"));
    let b = tape.param("oracle/b", params.get("oracle/b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn map_jobs<O: Send>(
    parallel: bool,
    n: usize,
    f: impl Fn(usize) -> Result<O> + Sync + Send,
) -> Result<Vec<O>> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Accumulate per-sample gradient lists into the store, in sample order.
fn apply_grads(params: &mut Params, per_sample: Vec<Vec<(String, Vec<f32>)>>) {
    for grads in per_sample {
        for (name, g) in grads {
            params.get_mut(&name).accumulate_grad(&g);
        }
    }
}

fn epoch_order(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(derive_seed(seed, &[tag(stage), tag("order"), epoch as u64]));
    rng.shuffle(&mut order);
    order
}

pub struct StageArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Stage 0: joint supervised training of the policy (teacher-forced
/// reasoning/answer targets) and the mask head (oracle box prompts).
/// Divergence (non-finite loss or gradient) aborts with an error.
pub fn cmd_bootstrap(cfg: &RunConfig, out_dir: &Path) -> Result<StageArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let models = build_models(cfg);
    let samples = train_split(cfg)?;
    let mut params = Params::new();
    let mut rng = Rng::new(derive_seed(cfg.seed, &[tag("init")]));
    models.policy.init_params(&mut params, &mut rng);
    models.head.init_params(&mut params, &mut rng);
    // box coordinates are O(1) after normalization; give the embedding
    // enough scale that the prompt is visible to the decoder from step one
    params.insert(
        "oracle/w",
        Tensor::randn(&[4, cfg.model.seg_dim], 0.5, &mut rng),
    );
    params.insert("oracle/b", Tensor::zeros(&[cfg.model.seg_dim]));
    // auxiliary grounding heads (bootstrap only, frozen afterwards)
    params.insert("aux/w", Tensor::randn(&[cfg.model.dim, 4], 0.02, &mut rng));
    params.insert("aux/w_mid", Tensor::randn(&[cfg.model.dim, 4], 0.02, &mut rng));
    params.insert("aux/b", Tensor::zeros(&[4]));
    params.set_trainable(|_| true);

    let hyper = &cfg.bootstrap;
    let adam = AdamHyper {
        weight_decay: hyper.weight_decay as f32,
        ..Default::default()
    };
    let mut opt = AdamW::new();
    let mut log = MetricsLog::create(&out_dir.join("metrics_bootstrap.jsonl"))?;
    let parallel = cfg.parallel();

    // targets are fixed; tokenize once
    let targets: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| {
            models
                .policy
                .vocab
                .tokenize(&completion_target_tokens(&s.cot_target, s.gt_box))
        })
        .collect::<Result<_>>()?;

    // phase 1: teach the policy its reasoning/answer templates, plus an
    // auxiliary regression that plants the target box in its hidden states
    let batches_per_epoch = samples.len().div_ceil(hyper.batch);
    let policy_steps = (hyper.policy_epochs * batches_per_epoch) as u64;
    let sched = LrSchedule::new(hyper.scheduler, hyper.lr as f32, policy_steps, hyper.warmup);
    params.set_trainable(|n| n.starts_with("policy/") || n.starts_with("aux/"));
    let mut step = 0u64;
    for epoch in 0..hyper.policy_epochs {
        let order = epoch_order(samples.len(), cfg.seed, "bootstrap_policy", epoch);
        for chunk in order.chunks(hyper.batch) {
            let lr = sched.lr_at(step)?.max(1e-12);
            let inv_b = 1.0 / chunk.len() as f64;
            let results = map_jobs(parallel, chunk.len(), |j| {
                let s = &samples[chunk[j]];
                let img = render(&s.scene);
                let layout = models.policy.layout(&img, &s.expression)?;
                let target = &targets[chunk[j]];
                let mut tape = Tape::<f32>::new();
                let (hidden, pre_last) = models.policy.forward_hidden_full(
                    &mut tape, &params, &layout, target, None, None,
                )?;
                let ls = models.policy.completion_log_softmax(
                    &mut tape,
                    &params,
                    hidden,
                    layout.len(),
                    target.len(),
                );
                let picked = tape.pick_per_row(ls, target);
                let picked_mean = tape.mean(picked);
                let lm = tape.scale(picked_mean, -1.0);
                // aux grounding: late positions regress the normalized
                // target box, both on the final hidden states and on the
                // stream the last attention layer reads
                let norm: Vec<f32> = s
                    .gt_box
                    .iter()
                    .map(|&v| v as f32 / s.scene.width.max(s.scene.height) as f32)
                    .collect();
                let (r0, r1) = (layout.len() - 1, layout.len() - 1 + target.len());
                let gt_rows: Vec<f32> = norm
                    .iter()
                    .copied()
                    .cycle()
                    .take(4 * (r1 - r0))
                    .collect();
                let mut aux_terms = Vec::new();
                for (stream, head) in [(hidden, "aux/w"), (pre_last, "aux/w_mid")] {
                    let rows = tape.row_slice(stream, r0, r1);
                    let aux_w = tape.param(head, params.get(head));
                    let aux_b = tape.param("aux/b", params.get("aux/b"));
                    let pred = tape.matmul(rows, aux_w);
                    let pred = tape.add_row(pred, aux_b);
                    let gtv = tape.constant_f32(r1 - r0, 4, &gt_rows);
                    let diff = tape.sub(pred, gtv);
                    let sq = tape.mul(diff, diff);
                    aux_terms.push(tape.mean(sq));
                }
                let aux = tape.add(aux_terms[0], aux_terms[1]);
                let aux_term = tape.scale(aux, hyper.aux_box_weight);
                let total = tape.add(lm, aux_term);
                let total = tape.scale(total, inv_b);
                tape.backward(total)?;
                Ok((
                    tape.scalar(lm) as f64,
                    tape.scalar(aux) as f64,
                    tape.param_grads(),
                ))
            })?;
            let mut lm_sum = 0.0;
            let mut aux_sum = 0.0;
            let mut grads = Vec::with_capacity(results.len());
            for (lm, aux, g) in results {
                lm_sum += lm;
                aux_sum += aux;
                grads.push(g);
            }
            apply_grads(&mut params, grads);
            opt.step(&mut params, lr, &adam)?;
            params.zero_grads();
            params.assert_all_finite("bootstrap policy step")?;
            log.log(&SupervisedMetrics {
                step,
                stage: "bootstrap".into(),
                loss: lm_sum / chunk.len() as f64,
                lm_loss: Some(lm_sum / chunk.len() as f64),
                seg_loss: None,
                aux_loss: Some(aux_sum / chunk.len() as f64),
                lr: lr as f64,
            })?;
            step += 1;
        }
    }

    // phase 2: teach the mask head to segment from oracle box prompts.
    // Half the prompts are jittered a couple of pixels so the decoder
    // learns to segment the shape near the box rather than the box region
    // itself; alignment later drives it with coarse learned prompts.
    let mask_steps = (hyper.mask_epochs * batches_per_epoch) as u64;
    let sched = LrSchedule::new(hyper.scheduler, hyper.lr as f32, mask_steps, hyper.warmup);
    params.set_trainable(|n| n.starts_with("mask/") || n.starts_with("oracle/"));
    let mut mstep = 0u64;
    for epoch in 0..hyper.mask_epochs {
        let order = epoch_order(samples.len(), cfg.seed, "bootstrap_mask", epoch);
        for chunk in order.chunks(hyper.batch) {
            let lr = sched.lr_at(mstep)?.max(1e-12);
            let inv_b = 1.0 / chunk.len() as f64;
            let results = map_jobs(parallel, chunk.len(), |j| {
                let s = &samples[chunk[j]];
                let img = render(&s.scene);
                let mut tape = Tape::<f32>::new();
                let grid = models.head.encode_image(&mut tape, &params, &img)?;
                let mut jrng = Rng::new(derive_seed(
                    cfg.seed,
                    &[tag("box_jitter"), epoch as u64, s.id as u64],
                ));
                let prompt_box = jitter_box(
                    s.gt_box,
                    s.scene.width,
                    s.scene.height,
                    &mut jrng,
                );
                let prompt = oracle_prompt(
                    &mut tape,
                    &params,
                    prompt_box,
                    s.scene.width,
                    s.scene.height,
                    cfg.model.queries,
                );
                let logits = models.head.decode_mask(&mut tape, &params, &grid, prompt)?;
                let segl = seg_loss(&mut tape, &logits, &s.gt_mask)?;
                let total = tape.scale(segl, inv_b);
                tape.backward(total)?;
                Ok((tape.scalar(segl) as f64, tape.param_grads()))
            })?;
            let mut seg_sum = 0.0;
            let mut grads = Vec::with_capacity(results.len());
            for (sg, g) in results {
                seg_sum += sg;
                grads.push(g);
            }
            apply_grads(&mut params, grads);
            opt.step(&mut params, lr, &adam)?;
            params.zero_grads();
            params.assert_all_finite("bootstrap mask step")?;
            log.log(&SupervisedMetrics {
                step,
                stage: "bootstrap".into(),
                loss: seg_sum / chunk.len() as f64,
                lm_loss: None,
                seg_loss: Some(seg_sum / chunk.len() as f64),
                aux_loss: None,
                lr: lr as f64,
            })?;
            step += 1;
            mstep += 1;
        }
    }
    params.set_trainable(|_| true);

    let ckpt_path = out_dir.join("bootstrap.ckpt");
    Checkpoint {
        stage: Stage::Bootstrap,
        params,
        opt,
        rng_state: rng.state(),
        config_hash: cfg.hash(),
    }
    .save(&ckpt_path)?;
    Ok(StageArtifacts {
        checkpoint: ckpt_path,
        metrics: out_dir.join("metrics_bootstrap.jsonl"),
    })
}

fn hash_policy(params: &Params) -> u64 {
    params.hash_subset(|n| n.starts_with("policy/"))
}

fn hash_mask(params: &Params) -> u64 {
    params.hash_subset(|n| {
        n.starts_with("mask/") || n.starts_with("oracle/") || n.starts_with("aux/")
    })
}

fn hash_encoder(params: &Params) -> u64 {
    params.hash_subset(MaskHead::is_encoder_param)
}

/// Stage 1: freeze the policy and the whole mask head; train only the
/// context queries and connector against the segmentation loss of masks
/// decoded from greedy completions.
pub fn cmd_align(
    cfg: &RunConfig,
    bootstrap_ckpt: &Path,
    out_dir: &Path,
    override_hash: bool,
) -> Result<StageArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ck = Checkpoint::load(bootstrap_ckpt, Some(cfg.hash()), override_hash)?;
    if ck.stage != Stage::Bootstrap {
        return Err(LensError::StageOrder(format!(
            "align requires a bootstrap checkpoint, got stage {:?}",
            ck.stage.tag()
        )));
    }
    let models = build_models(cfg);
    let mut params = ck.params;
    let mut rng = Rng::new(derive_seed(cfg.seed, &[tag("align_init")]));
    models.bridge.init_params(&mut params, &mut rng);
    params.set_trainable(Bridge::owns);

    let policy_hash_before = hash_policy(&params);
    let mask_hash_before = hash_mask(&params);

    let samples = train_split(cfg)?;
    let parallel = cfg.parallel();

    // frozen policy: greedy completions are per-sample constants
    let completions: Vec<Vec<u32>> = map_jobs(parallel, samples.len(), |i| {
        let s = &samples[i];
        let img = render(&s.scene);
        let layout = models.policy.layout(&img, &s.expression)?;
        let mut g = Rng::new(0);
        Ok(models
            .policy
            .generate(&params, &layout, 0.0, cfg.rl.max_new_tokens, &mut g)?
            .tokens)
    })?;
    // frozen encoder: grids are per-sample constants
    let grids: Vec<Vec<f32>> = map_jobs(parallel, samples.len(), |i| {
        encode_grid_values(&models, &params, &samples[i])
    })?;
    // frozen policy: per-sample prefix keys/values are constants too; cache
    // them across epochs while they fit a memory budget
    let kvs: Vec<crate::policy::PrefixKv> = map_jobs(parallel, samples.len(), |i| {
        let s = &samples[i];
        let img = render(&s.scene);
        let layout = models.policy.layout(&img, &s.expression)?;
        models.policy.prefix_kv(&params, &layout, &completions[i])
    })?;
    let kv_bytes: usize = kvs.iter().map(|kv| kv.byte_size()).sum();
    const KV_CACHE_CAP: usize = 1 << 30;
    let kv_cache = if kv_bytes <= KV_CACHE_CAP { Some(kvs) } else { None };

    let hyper = &cfg.align;
    let batches_per_epoch = samples.len().div_ceil(hyper.batch);
    let total_steps = (hyper.epochs * batches_per_epoch) as u64;
    let sched = LrSchedule::new(hyper.scheduler, hyper.lr as f32, total_steps, hyper.warmup);
    let adam = AdamHyper {
        weight_decay: hyper.weight_decay as f32,
        ..Default::default()
    };
    let mut opt = AdamW::new();
    let metrics_path = out_dir.join("metrics_align.jsonl");
    let mut log = MetricsLog::create(&metrics_path)?;
    let (gw, gh) = (
        cfg.world.width / crate::maskhead::ENC_PATCH,
        cfg.world.height / crate::maskhead::ENC_PATCH,
    );

    let mut step = 0u64;
    for epoch in 0..hyper.epochs {
        let order = epoch_order(samples.len(), cfg.seed, "align", epoch);
        for chunk in order.chunks(hyper.batch) {
            let lr = sched.lr_at(step)?.max(1e-12);
            let inv_b = 1.0 / chunk.len() as f64;
            let results = map_jobs(parallel, chunk.len(), |j| {
                let idx = chunk[j];
                let s = &samples[idx];
                let kv_fresh;
                let kv = match &kv_cache {
                    Some(kvs) => &kvs[idx],
                    None => {
                        let img = render(&s.scene);
                        let layout = models.policy.layout(&img, &s.expression)?;
                        kv_fresh = models.policy.prefix_kv(&params, &layout, &completions[idx])?;
                        &kv_fresh
                    }
                };
                let mut tape = Tape::<f32>::new();
                let q = models.bridge.queries_var(&mut tape, &params);
                let qp = models
                    .policy
                    .extract_context_from_kv(&mut tape, &params, kv, q)?;
                let qseg = models.bridge.connect(&mut tape, &params, qp);
                let grid = models.head.grid_from_values(&mut tape, gw, gh, &grids[idx]);
                let logits = models.head.decode_mask(&mut tape, &params, &grid, qseg)?;
                let segl = seg_loss(&mut tape, &logits, &s.gt_mask)?;
                let total = tape.scale(segl, inv_b);
                tape.backward(total)?;
                Ok((tape.scalar(segl) as f64, tape.param_grads()))
            })?;
            let mut loss_sum = 0.0;
            let mut grads = Vec::with_capacity(results.len());
            for (l, g) in results {
                loss_sum += l;
                grads.push(g);
            }
            apply_grads(&mut params, grads);
            #[cfg(debug_assertions)]
            let frozen = (hash_policy(&params), hash_mask(&params));
            opt.step(&mut params, lr, &adam)?;
            params.zero_grads();
            #[cfg(debug_assertions)]
            debug_assert_eq!(
                frozen,
                (hash_policy(&params), hash_mask(&params)),
                "frozen backbone drifted during an align step"
            );
            log.log(&SupervisedMetrics {
                step,
                stage: "align".into(),
                loss: loss_sum / chunk.len() as f64,
                lm_loss: None,
                seg_loss: Some(loss_sum / chunk.len() as f64),
                aux_loss: None,
                lr: lr as f64,
            })?;
            step += 1;
        }
    }

    if hash_policy(&params) != policy_hash_before || hash_mask(&params) != mask_hash_before {
        return Err(LensError::FreezeViolation(
            "alignment must leave the policy and mask head untouched".into(),
        ));
    }

    let ckpt_path = out_dir.join("align.ckpt");
    Checkpoint {
        stage: Stage::Align,
        params,
        opt,
        rng_state: rng.state(),
        config_hash: cfg.hash(),
    }
    .save(&ckpt_path)?;
    Ok(StageArtifacts {
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}

/// Stage 2: GRPO over the unified rewards with the joint segmentation term.
/// The reference policy is the alignment checkpoint's policy; only the
/// segmentation image encoder (and the retired oracle embedding) stays
/// frozen.
pub fn cmd_rl(
    cfg: &RunConfig,
    align_ckpt: &Path,
    out_dir: &Path,
    override_hash: bool,
) -> Result<StageArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ck = Checkpoint::load(align_ckpt, Some(cfg.hash()), override_hash)?;
    if ck.stage != Stage::Align {
        return Err(LensError::StageOrder(format!(
            "rl requires an align checkpoint, got stage {:?}",
            ck.stage.tag()
        )));
    }
    let models = build_models(cfg);
    let mut params = ck.params;
    params.set_trainable(|n| {
        (n.starts_with("policy/") || n.starts_with("bridge/") || MaskHead::is_decoder_param(n))
            && !MaskHead::is_encoder_param(n)
    });
    let ref_policy = params.snapshot(|n| n.starts_with("policy/"));
    let enc_hash_before = hash_encoder(&params);

    let samples = train_split(cfg)?;
    let hyper = RlHyper {
        delta: cfg.rl.delta,
        epsilon: cfg.rl.epsilon,
        beta: cfg.rl.beta,
        alpha: cfg.rl.alpha,
        lambdas: cfg.lambdas(),
        group_size: cfg.rl.group_size,
        inner_epochs: cfg.rl.inner_epochs,
        temperature: cfg.rl.temperature,
        max_new_tokens: cfg.rl.max_new_tokens,
    };
    let sched = LrSchedule::new(
        cfg.rl.scheduler,
        cfg.rl.lr as f32,
        cfg.rl.steps,
        cfg.rl.warmup,
    );
    let adam = AdamHyper {
        weight_decay: cfg.rl.weight_decay as f32,
        ..Default::default()
    };
    let mut opt = AdamW::new();
    let metrics_path = out_dir.join("metrics_rl.jsonl");
    let mut log = MetricsLog::create(&metrics_path)?;

    let mut order: Vec<usize> = Vec::new();
    let mut order_rng = Rng::new(derive_seed(cfg.seed, &[tag("rl_order")]));
    let mut cursor = 0usize;
    for step in 0..cfg.rl.steps {
        let mut batch: Vec<ReferringSample> = Vec::with_capacity(cfg.rl.batch);
        for _ in 0..cfg.rl.batch {
            if cursor >= order.len() {
                order = (0..samples.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let lr = sched.lr_at(step)?.max(1e-12);
        let (_groups, metrics) = rl_step(
            &models,
            &mut params,
            &ref_policy,
            &batch,
            &hyper,
            lr,
            &mut opt,
            &adam,
            step,
            cfg.seed,
            cfg.parallel(),
        )?;
        log.log(&metrics)?;
    }

    if hash_encoder(&params) != enc_hash_before {
        return Err(LensError::FreezeViolation(
            "the segmentation image encoder must stay frozen through the rl stage".into(),
        ));
    }

    let ckpt_path = out_dir.join("rl.ckpt");
    Checkpoint {
        stage: Stage::Rl,
        params,
        opt,
        rng_state: order_rng.state(),
        config_hash: cfg.hash(),
    }
    .save(&ckpt_path)?;
    Ok(StageArtifacts {
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}
