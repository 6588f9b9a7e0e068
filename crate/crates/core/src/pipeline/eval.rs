//! Checkpoint evaluation and offline prediction scoring.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Stage};
use super::config::RunConfig;
use super::stages::{build_models, heldout_split, oracle_prompt, train_split};
use crate::grpo::predict_mask;
use crate::maskhead::binarize;
use crate::numerics::{Params, Tape};
use crate::rewards::{
    ciou_metric, giou_metric, mask_iou, parse_completion, unified_reward, PredictionRecord,
};
use crate::rng::Rng;
use crate::synthworld::{import_dataset, render, Mask, ReferringSample};
use crate::{LensError, Result};

/// Greedy-evaluation summary for one checkpoint and split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub stage: String,
    pub split: String,
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub parse_rate: f64,
    pub r_format: f64,
    pub r_box: f64,
    pub r_seg: f64,
    pub r_unified: f64,
}

pub fn resolve_split(cfg: &RunConfig, split: &str) -> Result<Vec<ReferringSample>> {
    match split {
        "train" => train_split(cfg),
        "heldout" => heldout_split(cfg),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(LensError::InvalidArgument(format!(
                    "split {split:?} is neither train, heldout, nor an existing dataset file"
                )));
            }
            import_dataset(p, &cfg.world)
        }
    }
}

struct PerSample {
    parsed_ok: bool,
    r_format: f64,
    r_box: f64,
    r_seg: f64,
    r_unified: f64,
    pred_mask: Mask,
    record: PredictionRecord,
}

fn eval_one(
    cfg: &RunConfig,
    models: &crate::grpo::LensModels,
    params: &Params,
    stage: Stage,
    sample: &ReferringSample,
) -> Result<PerSample> {
    let img = render(&sample.scene);
    let layout = models.policy.layout(&img, &sample.expression)?;
    let mut rng = Rng::new(0);
    let completion = models
        .policy
        .generate(params, &layout, 0.0, cfg.rl.max_new_tokens, &mut rng)?;
    let parsed = parse_completion(&completion.text, sample.scene.width, sample.scene.height);
    let pred_mask = match stage {
        Stage::Bootstrap => {
            // no context module yet: the mask head runs on oracle prompts
            let mut tape = Tape::<f32>::new();
            let grid = models.head.encode_image(&mut tape, params, &img)?;
            let prompt = oracle_prompt(
                &mut tape,
                params,
                sample.gt_box,
                sample.scene.width,
                sample.scene.height,
                cfg.model.queries,
            );
            let out = models.head.decode_mask(&mut tape, params, &grid, prompt)?;
            let logits = tape.value(out.logits).to_vec();
            binarize(&logits, out.width, out.height, 0.0)
        }
        _ => predict_mask(models, params, sample, &completion.tokens)?.0,
    };
    let reward = unified_reward(
        &parsed,
        &pred_mask,
        sample.gt_box,
        &sample.gt_mask,
        cfg.lambdas(),
    )?;
    let record = PredictionRecord {
        id: sample.id,
        pred_box: if parsed.wellformed { parsed.box_pred } else { None },
        pred_mask_rle: pred_mask.encode_rle(),
    };
    Ok(PerSample {
        parsed_ok: parsed.wellformed,
        r_format: reward.r_format,
        r_box: reward.r_box,
        r_seg: reward.r_seg,
        r_unified: reward.r_unified,
        pred_mask,
        record,
    })
}

/// Greedy generation over a split: gIoU/cIoU, reward means, parse rate.
/// Writes the prediction JSONL and the report JSON next to it.
pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt_path: &Path,
    split: &str,
    out_dir: &Path,
    override_hash: bool,
) -> Result<(EvalReport, PathBuf)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ck = Checkpoint::load(ckpt_path, Some(cfg.hash()), override_hash)?;
    let models = build_models(cfg);
    let samples = resolve_split(cfg, split)?;
    if samples.is_empty() {
        return Err(LensError::InvalidArgument("empty eval split".into()));
    }
    let params = &ck.params;
    let run = |i: usize| eval_one(cfg, &models, params, ck.stage, &samples[i]);
    let results: Vec<PerSample> = if cfg.parallel() {
        (0..samples.len()).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..samples.len()).map(run).collect::<Result<_>>()?
    };

    let n = results.len();
    let pairs: Vec<(Mask, Mask)> = results
        .iter()
        .zip(&samples)
        .map(|(r, s)| (r.pred_mask.clone(), s.gt_mask.clone()))
        .collect();
    let report = EvalReport {
        stage: ck.stage.tag().to_string(),
        split: split.to_string(),
        n,
        giou: giou_metric(&pairs)?,
        ciou: ciou_metric(&pairs)?,
        parse_rate: results.iter().filter(|r| r.parsed_ok).count() as f64 / n as f64,
        r_format: results.iter().map(|r| r.r_format).sum::<f64>() / n as f64,
        r_box: results.iter().map(|r| r.r_box).sum::<f64>() / n as f64,
        r_seg: results.iter().map(|r| r.r_seg).sum::<f64>() / n as f64,
        r_unified: results.iter().map(|r| r.r_unified).sum::<f64>() / n as f64,
    };

    let split_slug = split.replace(['/', '.'], "_");
    let pred_path = out_dir.join(format!("predictions_{}_{}.jsonl", ck.stage.tag(), split_slug));
    let mut f = std::fs::File::create(&pred_path)?;
    for r in &results {
        serde_json::to_writer(&mut f, &r.record)?;
        f.write_all(b"\n")?;
    }
    let report_path = out_dir.join(format!("eval_{}_{}.json", ck.stage.tag(), split_slug));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    Ok((report, report_path))
}

/// Offline scoring summary of a prediction file against a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreReport {
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub mean_box_iou: f64,
}

/// Score a prediction JSONL against ground truth.
pub fn score_predictions(samples: &[ReferringSample], pred_path: &Path) -> Result<ScoreReport> {
    let f = std::fs::File::open(pred_path)?;
    let mut by_id = std::collections::BTreeMap::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| LensError::Dataset {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        by_id.insert(rec.id, rec);
    }
    let mut pairs = Vec::with_capacity(samples.len());
    let mut box_sum = 0.0;
    for s in samples {
        let rec = by_id.get(&s.id).ok_or_else(|| {
            LensError::InvalidArgument(format!("no prediction for sample id {}", s.id))
        })?;
        let mask = Mask::decode_rle(s.scene.width, s.scene.height, &rec.pred_mask_rle)?;
        if let Some(b) = rec.pred_box {
            if b[0] < b[2] && b[1] < b[3] {
                box_sum += crate::rewards::box_iou(b, s.gt_box);
            }
        }
        pairs.push((mask, s.gt_mask.clone()));
    }
    // exercise the pairwise metric too so the two stay consistent
    let giou = giou_metric(&pairs)?;
    debug_assert!({
        let per: f64 = pairs
            .iter()
            .map(|(p, g)| mask_iou(p, g).unwrap())
            .sum::<f64>()
            / pairs.len() as f64;
        (per - giou).abs() < 1e-12
    });
    Ok(ScoreReport {
        n: samples.len(),
        giou,
        ciou: ciou_metric(&pairs)?,
        mean_box_iou: box_sum / samples.len() as f64,
    })
}
