//! Dataset construction and JSON Lines serialization.
//!
//! One sample per line: `{"id", "seed", "width", "height", "expression",
//! "cot_target", "gt_box", "gt_mask_rle"}`. Images are not stored; the scene
//! is regenerated from `seed` on import and the target index recovered by
//! re-matching the expression's predicate.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rle::Mask;
use super::sample::{make_sample, parse_expression, ReferringSample};
use super::shapes::{generate_scene, Scene, WorldConfig};
use crate::rng::{derive_seed, tag, Rng};
use crate::{LensError, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: usize,
    seed: u64,
    width: usize,
    height: usize,
    expression: Vec<String>,
    cot_target: Vec<String>,
    gt_box: [i64; 4],
    gt_mask_rle: Vec<u32>,
}

/// Build a deterministic split: sample `i` comes from the first scene seed
/// in the stream `derive(base_seed, [tag(split), i, attempt])` that admits a
/// uniquely identifiable target.
pub fn build_split(
    config: &WorldConfig,
    base_seed: u64,
    split: &str,
    count: usize,
) -> Result<Vec<ReferringSample>> {
    const MAX_ATTEMPTS: u64 = 64;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut made = None;
        for attempt in 0..MAX_ATTEMPTS {
            let scene_seed = derive_seed(base_seed, &[tag(split), i as u64, attempt]);
            let Ok(scene) = generate_scene(scene_seed, config) else {
                continue;
            };
            let mut rng = Rng::new(derive_seed(scene_seed, &[tag("pick")]));
            if let Ok(sample) = make_sample(&scene, i, &mut rng) {
                made = Some(sample);
                break;
            }
        }
        out.push(made.ok_or(LensError::Placement(MAX_ATTEMPTS as usize))?);
    }
    Ok(out)
}

pub fn export_dataset(samples: &[ReferringSample], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for s in samples {
        let rec = SampleRecord {
            id: s.id,
            seed: s.scene.seed,
            width: s.scene.width,
            height: s.scene.height,
            expression: s.expression.clone(),
            cot_target: s.cot_target.clone(),
            gt_box: s.gt_box,
            gt_mask_rle: s.gt_mask.encode_rle(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Lossless inverse of [`export_dataset`] given the same world config.
/// Malformed lines are reported with their 1-based line number.
pub fn import_dataset(path: &Path, config: &WorldConfig) -> Result<Vec<ReferringSample>> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| LensError::Dataset {
            line: lineno,
            msg: e.to_string(),
        })?;
        let scene: Scene = generate_scene(rec.seed, config).map_err(|e| LensError::Dataset {
            line: lineno,
            msg: format!("scene regeneration failed: {e}"),
        })?;
        if scene.width != rec.width || scene.height != rec.height {
            return Err(LensError::Dataset {
                line: lineno,
                msg: format!(
                    "stored size {}x{} does not match config {}x{}",
                    rec.width, rec.height, scene.width, scene.height
                ),
            });
        }
        let gt_mask =
            Mask::decode_rle(rec.width, rec.height, &rec.gt_mask_rle).map_err(|e| {
                LensError::Dataset {
                    line: lineno,
                    msg: e.to_string(),
                }
            })?;
        let predicate = parse_expression(&rec.expression).map_err(|_| LensError::Dataset {
            line: lineno,
            msg: format!("unparseable expression {:?}", rec.expression),
        })?;
        let matches = predicate.matching_shapes(&scene);
        let [target_index] = matches.as_slice() else {
            return Err(LensError::Dataset {
                line: lineno,
                msg: format!(
                    "expression matches {} shapes, expected exactly 1",
                    matches.len()
                ),
            });
        };
        out.push(ReferringSample {
            id: rec.id,
            scene,
            expression: rec.expression,
            target_index: *target_index,
            gt_box: rec.gt_box,
            gt_mask,
            cot_target: rec.cot_target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lens-dataset-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = WorldConfig::default();
        let samples = build_split(&cfg, 42, "train", 100).unwrap();
        let path = tmpfile("roundtrip.jsonl");
        export_dataset(&samples, &path).unwrap();
        let back = import_dataset(&path, &cfg).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn splits_are_deterministic_and_distinct() {
        let cfg = WorldConfig::default();
        let a = build_split(&cfg, 42, "train", 16).unwrap();
        let b = build_split(&cfg, 42, "train", 16).unwrap();
        assert_eq!(a, b);
        let h = build_split(&cfg, 42, "heldout", 16).unwrap();
        assert_ne!(a[0].scene, h[0].scene);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let cfg = WorldConfig::default();
        let samples = build_split(&cfg, 42, "train", 3).unwrap();
        let path = tmpfile("truncated.jsonl");
        export_dataset(&samples, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = content.lines().collect();
        let cut = lines[2];
        let cut = &cut[..cut.len() / 2];
        lines[2] = cut;
        std::fs::write(&path, lines.join("\n")).unwrap();
        match import_dataset(&path, &cfg) {
            Err(LensError::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn rle_length_mismatch_is_rejected() {
        let cfg = WorldConfig::default();
        let samples = build_split(&cfg, 42, "train", 1).unwrap();
        let path = tmpfile("badrle.jsonl");
        export_dataset(&samples, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let modified = content.replace("\"gt_mask_rle\":[", "\"gt_mask_rle\":[7,");
        std::fs::write(&path, modified).unwrap();
        assert!(import_dataset(&path, &cfg).is_err());
    }
}
