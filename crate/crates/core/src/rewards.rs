//! Completion parsing, the unified format/box/segment rewards, and the
//! gIoU/cIoU evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::synthworld::Mask;
use crate::{LensError, Result};

/// Result of strict structural parsing of a completion.
///
/// `wellformed` requires exactly one `<thinking>…</thinking>` pair followed
/// by exactly one `<answer>…</answer>` pair, nothing before or between them
/// but whitespace, and nothing after `</answer>` except whitespace and an
/// optional end marker. `cot_text` and `box_pred` are extracted best-effort
/// even from malformed text for diagnostics; rewards only use the box of a
/// wellformed completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub wellformed: bool,
    pub cot_text: String,
    pub box_pred: Option<[i64; 4]>,
}

const T_OPEN: &str = "<thinking>";
const T_CLOSE: &str = "</thinking>";
const A_OPEN: &str = "<answer>";
const A_CLOSE: &str = "</answer>";
const END_MARKER: &str = "<eos>";

fn find_all(text: &str, pat: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    while let Some(pos) = text[start..].find(pat) {
        out.push(start + pos);
        start += pos + 1;
    }
    out
}

/// Parse `[x1,y1,x2,y2]` from an answer body. Multi-digit numbers may be
/// written as adjacent digit tokens ("1 0" is 10); whitespace is free.
fn parse_box_body(body: &str) -> Option<[i64; 4]> {
    let s = body.trim();
    let s = s.strip_prefix('[')?;
    let s = s.strip_suffix(']')?;
    let mut coords: Vec<i64> = Vec::with_capacity(4);
    for field in s.split(',') {
        let digits: String = field.split_whitespace().collect();
        if digits.is_empty() || digits.len() > 8 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        coords.push(digits.parse().ok()?);
    }
    coords.try_into().ok()
}

/// Clamp to image bounds and reject degenerate boxes.
fn validate_box(raw: [i64; 4], width: usize, height: usize) -> Option<[i64; 4]> {
    let (w, h) = (width as i64, height as i64);
    let b = [
        raw[0].clamp(0, w),
        raw[1].clamp(0, h),
        raw[2].clamp(0, w),
        raw[3].clamp(0, h),
    ];
    (b[0] < b[2] && b[1] < b[3]).then_some(b)
}

/// Structural parse of a generated completion. Parsing never fails;
/// malformedness is data.
pub fn parse_completion(text: &str, width: usize, height: usize) -> ParsedAnswer {
    let t_open = find_all(text, T_OPEN);
    let t_close = find_all(text, T_CLOSE);
    let a_open = find_all(text, A_OPEN);
    let a_close = find_all(text, A_CLOSE);

    // best-effort extraction for diagnostics
    let cot_text = match (t_open.first(), t_close.first()) {
        (Some(&o), Some(&c)) if o + T_OPEN.len() <= c => {
            text[o + T_OPEN.len()..c].trim().to_string()
        }
        _ => String::new(),
    };
    let box_pred = match (a_open.first(), a_close.first()) {
        (Some(&o), Some(&c)) if o + A_OPEN.len() <= c => {
            parse_box_body(&text[o + A_OPEN.len()..c])
                .and_then(|b| validate_box(b, width, height))
        }
        _ => None,
    };

    // `<thinking>` occurs inside `</thinking>` as a substring; a tag count
    // of one means one occurrence net of the closing-tag overlap.
    let t_open_only = t_open
        .iter()
        .filter(|&&p| !t_close.contains(&(p.wrapping_sub(1))) || p == 0)
        .filter(|&&p| !(p >= 1 && text.as_bytes().get(p - 1) == Some(&b'/')))
        .count();
    let a_open_only = a_open
        .iter()
        .filter(|&&p| !(p >= 1 && text.as_bytes().get(p - 1) == Some(&b'/')))
        .count();

    let wellformed = (|| {
        if t_open_only != 1 || t_close.len() != 1 || a_open_only != 1 || a_close.len() != 1 {
            return false;
        }
        let to = *t_open
            .iter()
            .find(|&&p| !(p >= 1 && text.as_bytes().get(p - 1) == Some(&b'/')))
            .unwrap();
        let tc = t_close[0];
        let ao = *a_open
            .iter()
            .find(|&&p| !(p >= 1 && text.as_bytes().get(p - 1) == Some(&b'/')))
            .unwrap();
        let ac = a_close[0];
        if !(to < tc && tc < ao && ao < ac) {
            return false;
        }
        if !text[..to].trim().is_empty() {
            return false;
        }
        if !text[tc + T_CLOSE.len()..ao].trim().is_empty() {
            return false;
        }
        let tail = text[ac + A_CLOSE.len()..].trim();
        tail.is_empty() || tail == END_MARKER
    })();

    ParsedAnswer {
        wellformed,
        cot_text,
        box_pred,
    }
}

/// 1 iff the completion structure is correct, else 0.
pub fn reward_format(parsed: &ParsedAnswer) -> f64 {
    if parsed.wellformed {
        1.0
    } else {
        0.0
    }
}

/// Intersection-over-union of two boxes in pixel-corner convention
/// (area = (x2-x1)*(y2-y1)). Disjoint boxes score 0.
pub fn box_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    debug_assert!(a[0] < a[2] && a[1] < a[3], "invalid box a");
    debug_assert!(b[0] < b[2] && b[1] < b[3], "invalid box b");
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    inter as f64 / union as f64
}

/// Mask IoU: |pred ∧ gt| / |pred ∨ gt|. Empty prediction scores 0.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(LensError::Shape {
            context: "mask_iou",
            expected: format!("{}x{}", gt.width(), gt.height()),
            got: format!("{}x{}", pred.width(), pred.height()),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Component weights of the unified reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub format: f64,
    pub boxr: f64,
    pub seg: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            format: 1.0,
            boxr: 1.0,
            seg: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_box: f64,
    pub r_seg: f64,
    pub r_unified: f64,
    pub lambdas: Lambdas,
}

/// Combine the three components: r = l1*format + l2*box + l3*seg.
/// The box term uses the parsed box only when the completion is wellformed;
/// the segment term is scored for every rollout (its prompt exists whether
/// or not the text parsed).
pub fn unified_reward(
    parsed: &ParsedAnswer,
    pred_mask: &Mask,
    gt_box: [i64; 4],
    gt_mask: &Mask,
    lambdas: Lambdas,
) -> Result<RewardBreakdown> {
    let r_format = reward_format(parsed);
    let r_box = match (parsed.wellformed, parsed.box_pred) {
        (true, Some(b)) => box_iou(b, gt_box),
        _ => 0.0,
    };
    let r_seg = mask_iou(pred_mask, gt_mask)?;
    Ok(RewardBreakdown {
        r_format,
        r_box,
        r_seg,
        r_unified: lambdas.format * r_format + lambdas.boxr * r_box + lambdas.seg * r_seg,
        lambdas,
    })
}

/// Mean of per-image mask IoU.
pub fn giou_metric(pairs: &[(Mask, Mask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LensError::InvalidArgument("giou of an empty list".into()));
    }
    let mut total = 0.0;
    for (pred, gt) in pairs {
        total += mask_iou(pred, gt)?;
    }
    Ok(total / pairs.len() as f64)
}

/// IoU of the cumulative masks: sum of intersections / sum of unions.
pub fn ciou_metric(pairs: &[(Mask, Mask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LensError::InvalidArgument("ciou of an empty list".into()));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (pred, gt) in pairs {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(LensError::Shape {
                context: "ciou_metric",
                expected: format!("{}x{}", gt.width(), gt.height()),
                got: format!("{}x{}", pred.width(), pred.height()),
            });
        }
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            inter += (p && g) as u64;
            union += (p || g) as u64;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// One line of the offline-scoring prediction file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: usize,
    pub pred_box: Option<[i64; 4]>,
    pub pred_mask_rle: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn parse32(text: &str) -> ParsedAnswer {
        parse_completion(text, 32, 32)
    }

    #[test]
    fn grammar_case_parses() {
        let p = parse32("<thinking> red disc left </thinking><answer>[2,3,10,11]</answer>");
        assert!(p.wellformed);
        assert_eq!(p.box_pred, Some([2, 3, 10, 11]));
        assert_eq!(p.cot_text, "red disc left");
    }

    #[test]
    fn spaced_digit_tokens_compose_numbers() {
        let p = parse32("<thinking> t </thinking> <answer> [ 2 , 3 , 1 0 , 1 1 ] </answer> <eos>");
        assert!(p.wellformed);
        assert_eq!(p.box_pred, Some([2, 3, 10, 11]));
    }

    #[test]
    fn missing_thinking_is_malformed() {
        let p = parse32("<answer>[2,3,10,11]</answer>");
        assert!(!p.wellformed);
        assert_eq!(p.box_pred, Some([2, 3, 10, 11])); // diagnostic only
        assert_eq!(reward_format(&p), 0.0);
    }

    #[test]
    fn degenerate_box_is_rejected_but_format_ok() {
        let p = parse32("<thinking>a</thinking><answer>[5,5,2,2]</answer>");
        assert!(p.wellformed);
        assert_eq!(p.box_pred, None);
    }

    #[test]
    fn box_clamped_to_bounds() {
        let p = parse32("<thinking>a</thinking><answer>[0,0,99,99]</answer>");
        assert!(p.wellformed);
        assert_eq!(p.box_pred, Some([0, 0, 32, 32]));
    }

    #[test]
    fn box_iou_hand_cases() {
        assert_eq!(box_iou([0, 0, 2, 2], [0, 0, 2, 2]), 1.0);
        let v = box_iou([0, 0, 2, 2], [1, 1, 3, 3]);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(box_iou([0, 0, 2, 2], [5, 5, 8, 8]), 0.0);
    }

    #[test]
    fn box_iou_is_symmetric_and_bounded() {
        let mut rng = Rng::new(7);
        for _ in 0..500 {
            let mut mk = || {
                let x1 = rng.below(30) as i64;
                let y1 = rng.below(30) as i64;
                let x2 = x1 + 1 + rng.below(10) as i64;
                let y2 = y1 + 1 + rng.below(10) as i64;
                [x1, y1, x2, y2]
            };
            let (a, b) = (mk(), mk());
            let ab = box_iou(a, b);
            assert_eq!(ab, box_iou(b, a));
            assert!((0.0..=1.0).contains(&ab));
            assert_eq!(box_iou(a, a), 1.0);
        }
    }

    fn rand_mask(rng: &mut Rng, w: usize, h: usize, density: f64) -> Mask {
        let bits = (0..w * h).map(|_| rng.next_f64() < density).collect();
        Mask::from_bits(w, h, bits).unwrap()
    }

    #[test]
    fn mask_iou_matches_pixel_counting_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let pred = rand_mask(&mut rng, 8, 8, 0.4);
            let mut gt = rand_mask(&mut rng, 8, 8, 0.4);
            gt.set(0, 0, true);
            // brute-force per-pixel counting oracle
            let mut inter = 0.0;
            let mut union = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    if pred.get(x, y) && gt.get(x, y) {
                        inter += 1.0;
                    }
                    if pred.get(x, y) || gt.get(x, y) {
                        union += 1.0;
                    }
                }
            }
            let expect = inter / union;
            assert_eq!(mask_iou(&pred, &gt).unwrap(), expect);
        }
    }

    #[test]
    fn mask_iou_edge_cases() {
        let mut gt = Mask::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                gt.set(x, y, true);
            }
        }
        let mut left_half = Mask::new(4, 4);
        for y in 0..4 {
            for x in 0..2 {
                left_half.set(x, y, true);
            }
        }
        assert_eq!(mask_iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(mask_iou(&Mask::new(4, 4), &gt).unwrap(), 0.0);
        assert_eq!(mask_iou(&left_half, &gt).unwrap(), 0.5);
        assert!(mask_iou(&Mask::new(2, 2), &gt).is_err());
    }

    #[test]
    fn unified_reward_is_the_exact_linear_formula() {
        let parsed = parse32("<thinking>a</thinking><answer>[0,0,2,2]</answer>");
        let mut gt = Mask::new(4, 4);
        for i in 0..4 {
            gt.set(i % 4, i / 4, true);
        }
        let mut pred = Mask::new(4, 4);
        pred.set(0, 0, true); // iou 0.25
        let gt_box = [1, 1, 3, 3]; // box iou vs [0,0,2,2] = 1/7
        let l = Lambdas::default();
        let r = unified_reward(&parsed, &pred, gt_box, &gt, l).unwrap();
        assert_eq!(r.r_format, 1.0);
        assert!((r.r_box - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.r_seg, 0.25);
        assert_eq!(
            r.r_unified,
            l.format * r.r_format + l.boxr * r.r_box + l.seg * r.r_seg
        );
        // doubling the box weight doubles the box contribution (recompute)
        let l2 = Lambdas {
            boxr: 2.0,
            ..Lambdas::default()
        };
        let r2 = unified_reward(&parsed, &pred, gt_box, &gt, l2).unwrap();
        assert_eq!(
            r2.r_unified,
            l2.format * r.r_format + l2.boxr * r.r_box + l2.seg * r.r_seg
        );
        assert!((r2.r_unified - r.r_unified - r.r_box).abs() < 1e-12);
    }

    #[test]
    fn malformed_with_perfect_mask_scores_seg_only() {
        let parsed = parse32("<answer>[0,0,2,2]</answer>");
        let mut gt = Mask::new(4, 4);
        gt.set(1, 1, true);
        let r = unified_reward(&parsed, &gt.clone(), [0, 0, 2, 2], &gt, Lambdas::default()).unwrap();
        assert_eq!(r.r_format, 0.0);
        assert_eq!(r.r_box, 0.0);
        assert_eq!(r.r_seg, 1.0);
        assert_eq!(r.r_unified, r.r_seg);
    }

    #[test]
    fn format_only_lambdas() {
        let parsed = parse32("<thinking>a</thinking><answer>[0,0,2,2]</answer>");
        let mut gt = Mask::new(4, 4);
        gt.set(0, 0, true);
        let l = Lambdas {
            format: 1.0,
            boxr: 0.0,
            seg: 0.0,
        };
        let r = unified_reward(&parsed, &Mask::new(4, 4), [0, 0, 2, 2], &gt, l).unwrap();
        assert_eq!(r.r_unified, r.r_format);
    }

    fn mask_with(n: usize, of: usize) -> Mask {
        let bits = (0..of).map(|i| i < n).collect::<Vec<_>>();
        Mask::from_bits(of, 1, bits).unwrap()
    }

    #[test]
    fn worked_example_giou_vs_ciou() {
        // image A: inter 2, union 4; image B: inter 3, union 3
        let a_pred = mask_with(2, 4);
        let a_gt = mask_with(4, 4);
        let b_pred = mask_with(3, 3);
        let b_gt = mask_with(3, 3);
        let pairs = vec![(a_pred, a_gt), (b_pred, b_gt)];
        let g = giou_metric(&pairs).unwrap();
        let c = ciou_metric(&pairs).unwrap();
        assert!((g - 0.75).abs() < 1e-12);
        assert!((c - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_image_giou_equals_ciou() {
        let pred = mask_with(2, 4);
        let gt = mask_with(3, 4);
        let pairs = vec![(pred, gt)];
        assert_eq!(giou_metric(&pairs).unwrap(), ciou_metric(&pairs).unwrap());
    }

    #[test]
    fn ciou_matches_accumulation_oracle() {
        let mut rng = Rng::new(13);
        for _ in 0..200 {
            let n = 1 + rng.below(5);
            let mut pairs = Vec::new();
            let mut inter = 0u64;
            let mut union = 0u64;
            for _ in 0..n {
                let pred = rand_mask(&mut rng, 6, 6, 0.3);
                let mut gt = rand_mask(&mut rng, 6, 6, 0.3);
                gt.set(0, 0, true);
                for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
                    inter += (p && g) as u64;
                    union += (p || g) as u64;
                }
                pairs.push((pred, gt));
            }
            let expect = inter as f64 / union as f64;
            assert_eq!(ciou_metric(&pairs).unwrap(), expect);
        }
    }

    #[test]
    fn all_empty_predictions_score_zero() {
        let mut gt = Mask::new(4, 4);
        gt.set(2, 2, true);
        let pairs = vec![(Mask::new(4, 4), gt.clone()), (Mask::new(4, 4), gt)];
        assert_eq!(ciou_metric(&pairs).unwrap(), 0.0);
        assert_eq!(giou_metric(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn empty_list_is_error() {
        assert!(giou_metric(&[]).is_err());
        assert!(ciou_metric(&[]).is_err());
    }

    #[test]
    fn format_reward_ignores_cot_content() {
        for body in ["", "a", "red disc at [ 1 , 2 ]", "the the the"] {
            let p = parse32(&format!(
                "<thinking>{body}</thinking><answer>[1,1,2,2]</answer>"
            ));
            assert!(p.wellformed, "{body:?}");
        }
    }
}
