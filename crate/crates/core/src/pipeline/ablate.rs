//! Ablation harnesses: query count, connector architecture, and reward
//! composition. Every arm gets the same training budget and reports
//! held-out cIoU/gIoU as one CSV row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::eval::cmd_eval;
use super::stages::{cmd_align, cmd_rl};
use crate::bridge::ConnectorKind;
use crate::{LensError, Result};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub ciou: f64,
    pub giou: f64,
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,seed,ciou,giou\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.arm, r.seed, r.ciou, r.giou);
    }
    out
}

fn align_and_eval(cfg: &RunConfig, bootstrap_ckpt: &Path, arm_dir: &Path) -> Result<(f64, f64)> {
    // arms knowingly vary the config, so the stored hash will not match
    let art = cmd_align(cfg, bootstrap_ckpt, arm_dir, true)?;
    let (report, _) = cmd_eval(cfg, &art.checkpoint, "heldout", arm_dir, true)?;
    Ok((report.ciou, report.giou))
}

/// Run one ablation experiment from a bootstrap checkpoint and write the
/// comparison CSV. Experiments: `queries` (M in {1,16,32,64,128}),
/// `connector` (vit vs mlp over several seeds), `rewards`
/// (lambda (1,1,0) vs (1,1,1) through the RL stage).
pub fn cmd_ablate(
    cfg: &RunConfig,
    experiment: &str,
    bootstrap_ckpt: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<AblationRow>)> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    match experiment {
        "queries" => {
            for m in [1usize, 16, 32, 64, 128] {
                let mut arm = cfg.clone();
                arm.model.queries = m;
                arm.align.epochs = cfg.ablate.align_epochs;
                let dir = out_dir.join(format!("queries_m{m}"));
                let (ciou, giou) = align_and_eval(&arm, bootstrap_ckpt, &dir)?;
                rows.push(AblationRow {
                    arm: format!("m{m}"),
                    seed: arm.seed,
                    ciou,
                    giou,
                });
            }
        }
        "connector" => {
            for kind in [ConnectorKind::Vit, ConnectorKind::Mlp] {
                for s in 0..cfg.ablate.seeds as u64 {
                    let mut arm = cfg.clone();
                    arm.model.connector = kind;
                    arm.align.epochs = cfg.ablate.align_epochs;
                    arm.seed = cfg.seed + s;
                    let name = match kind {
                        ConnectorKind::Vit => "vit",
                        ConnectorKind::Mlp => "mlp",
                    };
                    let dir = out_dir.join(format!("connector_{name}_s{s}"));
                    let (ciou, giou) = align_and_eval(&arm, bootstrap_ckpt, &dir)?;
                    rows.push(AblationRow {
                        arm: name.to_string(),
                        seed: arm.seed,
                        ciou,
                        giou,
                    });
                }
            }
        }
        "rewards" => {
            // shared align arm, then RL with and without the segment reward
            let mut base = cfg.clone();
            base.align.epochs = cfg.ablate.align_epochs;
            let align_dir = out_dir.join("rewards_align");
            let align_art = cmd_align(&base, bootstrap_ckpt, &align_dir, true)?;
            for (name, lambda_seg) in [("format_box", 0.0), ("format_box_seg", 1.0)] {
                let mut arm = base.clone();
                arm.rl.lambda_seg = lambda_seg;
                arm.rl.steps = cfg.ablate.rl_steps;
                let dir = out_dir.join(format!("rewards_{name}"));
                let art = cmd_rl(&arm, &align_art.checkpoint, &dir, true)?;
                let (report, _) = cmd_eval(&arm, &art.checkpoint, "heldout", &dir, true)?;
                rows.push(AblationRow {
                    arm: name.to_string(),
                    seed: arm.seed,
                    ciou: report.ciou,
                    giou: report.giou,
                });
            }
        }
        other => {
            return Err(LensError::InvalidArgument(format!(
                "unknown experiment {other:?}; expected queries|connector|rewards"
            )))
        }
    }
    let csv_path = out_dir.join(format!("ablate_{experiment}.csv"));
    std::fs::write(&csv_path, rows_to_csv(&rows))?;
    Ok((csv_path, rows))
}
