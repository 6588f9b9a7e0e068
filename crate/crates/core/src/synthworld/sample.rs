//! Referring expressions over scenes: template grammar, attribute
//! predicates, uniqueness verification, and supervised reasoning targets.
//!
//! Four reference styles: attribute ("the red disc"), ordinal-spatial
//! ("second rectangle from the left"), superlative ("the largest blue
//! rectangle"), and clock-position ("the disc in the 3 o'clock position").

use serde::{Deserialize, Serialize};

use super::rle::Mask;
use super::shapes::{rasterize_mask, Color, Kind, Scene};
use crate::rng::Rng;
use crate::{LensError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

    pub fn word(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }
}

const ORDINALS: [&str; 6] = ["first", "second", "third", "fourth", "fifth", "sixth"];

/// Attribute predicate an expression denotes; evaluated exhaustively against
/// every shape to verify referential uniqueness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    Attr {
        color: Option<Color>,
        kind: Kind,
    },
    Ordinal {
        position: usize, // 1-based
        kind: Kind,
        side: Side,
    },
    Superlative {
        largest: bool,
        color: Option<Color>,
        kind: Kind,
    },
    Clock {
        kind: Kind,
        hour: u32,
    },
}

/// Clock hour of a shape's center seen from the image center; 12 is up,
/// 3 is right. None when the center is too close to the middle to commit.
pub fn clock_hour(scene: &Scene, idx: usize) -> Option<u32> {
    let s = &scene.shapes[idx];
    let (cx, cy) = s.center();
    let dx = cx - scene.width as f64 / 2.0;
    let dy = cy - scene.height as f64 / 2.0;
    if (dx * dx + dy * dy).sqrt() < 3.0 {
        return None;
    }
    // clockwise angle from "up"
    let ang = dx.atan2(-dy).to_degrees();
    let ang = if ang < 0.0 { ang + 360.0 } else { ang };
    let hour = (ang / 30.0).round() as u32 % 12;
    Some(if hour == 0 { 12 } else { hour })
}

fn side_coord(scene: &Scene, idx: usize, side: Side) -> i64 {
    let [x1, y1, x2, y2] = scene.shapes[idx].bbox();
    match side {
        Side::Left => x1,
        Side::Right => -x2,
        Side::Top => y1,
        Side::Bottom => -y2,
    }
}

impl Predicate {
    /// Does shape `idx` satisfy this predicate within `scene`?
    pub fn matches(&self, scene: &Scene, idx: usize) -> bool {
        let s = &scene.shapes[idx];
        match *self {
            Predicate::Attr { color, kind } => {
                s.kind == kind && color.map_or(true, |c| s.color == c)
            }
            Predicate::Ordinal {
                position,
                kind,
                side,
            } => {
                if s.kind != kind {
                    return false;
                }
                let mine = side_coord(scene, idx, side);
                let mut less = 0;
                let mut equal = 0;
                for (j, other) in scene.shapes.iter().enumerate() {
                    if other.kind != kind {
                        continue;
                    }
                    let c = side_coord(scene, j, side);
                    if c < mine {
                        less += 1;
                    } else if c == mine {
                        equal += 1;
                    }
                }
                // strict rank: no tie at this coordinate
                equal == 1 && less + 1 == position
            }
            Predicate::Superlative {
                largest,
                color,
                kind,
            } => {
                if s.kind != kind || color.map_or(false, |c| s.color != c) {
                    return false;
                }
                let group: Vec<usize> = (0..scene.shapes.len())
                    .filter(|&j| {
                        scene.shapes[j].kind == kind
                            && color.map_or(true, |c| scene.shapes[j].color == c)
                    })
                    .collect();
                let mine = s.size;
                group.iter().all(|&j| {
                    j == idx
                        || if largest {
                            scene.shapes[j].size < mine
                        } else {
                            scene.shapes[j].size > mine
                        }
                })
            }
            Predicate::Clock { kind, hour } => {
                s.kind == kind && clock_hour(scene, idx) == Some(hour)
            }
        }
    }

    /// Indices of all shapes matching; uniqueness means exactly one.
    pub fn matching_shapes(&self, scene: &Scene) -> Vec<usize> {
        (0..scene.shapes.len())
            .filter(|&i| self.matches(scene, i))
            .collect()
    }

    /// Expression tokens, e.g. `segment the second rectangle from the left`.
    pub fn expression_tokens(&self) -> Vec<String> {
        let mut t: Vec<String> = vec!["segment".into(), "the".into()];
        match *self {
            Predicate::Attr { color, kind } => {
                if let Some(c) = color {
                    t.push(c.word().into());
                }
                t.push(kind.word().into());
            }
            Predicate::Ordinal {
                position,
                kind,
                side,
            } => {
                t.push(ORDINALS[position - 1].into());
                t.push(kind.word().into());
                t.push("from".into());
                t.push("the".into());
                t.push(side.word().into());
            }
            Predicate::Superlative {
                largest,
                color,
                kind,
            } => {
                t.push(if largest { "largest" } else { "smallest" }.into());
                if let Some(c) = color {
                    t.push(c.word().into());
                }
                t.push(kind.word().into());
            }
            Predicate::Clock { kind, hour } => {
                t.push(kind.word().into());
                t.push("in".into());
                t.push("the".into());
                for d in hour.to_string().chars() {
                    t.push(d.to_string());
                }
                t.push("o'clock".into());
                t.push("position".into());
            }
        }
        t
    }

    /// Reasoning template naming the discriminating attributes (the
    /// `<thinking>` body used as the supervised bootstrap target).
    pub fn cot_tokens(&self) -> Vec<String> {
        let mut t: Vec<String> = vec!["target".into(), "is".into(), "the".into()];
        match *self {
            Predicate::Attr { color, kind } => {
                if let Some(c) = color {
                    t.push(c.word().into());
                }
                t.push(kind.word().into());
            }
            Predicate::Ordinal {
                position,
                kind,
                side,
            } => {
                t.push(ORDINALS[position - 1].into());
                t.push(kind.word().into());
                t.push("from".into());
                t.push("the".into());
                t.push(side.word().into());
            }
            Predicate::Superlative {
                largest,
                color,
                kind,
            } => {
                t.push(if largest { "largest" } else { "smallest" }.into());
                if let Some(c) = color {
                    t.push(c.word().into());
                }
                t.push(kind.word().into());
            }
            Predicate::Clock { kind, hour } => {
                t.push(kind.word().into());
                t.push("at".into());
                for d in hour.to_string().chars() {
                    t.push(d.to_string());
                }
                t.push("o'clock".into());
            }
        }
        t
    }
}

fn kind_from_word(w: &str) -> Option<Kind> {
    Kind::ALL.iter().copied().find(|k| k.word() == w)
}

fn color_from_word(w: &str) -> Option<Color> {
    Color::ALL.iter().copied().find(|c| c.word() == w)
}

/// Parse expression tokens back into the predicate they denote. Used to
/// recover the target index when importing a dataset file.
pub fn parse_expression(tokens: &[String]) -> Result<Predicate> {
    let bad = || LensError::Dataset {
        line: 0,
        msg: format!("unparseable expression: {tokens:?}"),
    };
    let t: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
    if t.len() < 3 || t[0] != "segment" || t[1] != "the" {
        return Err(bad());
    }
    let rest = &t[2..];
    // ordinal: <ord> <kind> from the <side>
    if let Some(pos) = ORDINALS.iter().position(|o| *o == rest[0]) {
        if rest.len() == 5 && rest[2] == "from" && rest[3] == "the" {
            let kind = kind_from_word(rest[1]).ok_or_else(bad)?;
            let side = Side::ALL
                .iter()
                .copied()
                .find(|s| s.word() == rest[4])
                .ok_or_else(bad)?;
            return Ok(Predicate::Ordinal {
                position: pos + 1,
                kind,
                side,
            });
        }
        return Err(bad());
    }
    // superlative: largest|smallest [color] <kind>
    if rest[0] == "largest" || rest[0] == "smallest" {
        let largest = rest[0] == "largest";
        return match rest.len() {
            2 => Ok(Predicate::Superlative {
                largest,
                color: None,
                kind: kind_from_word(rest[1]).ok_or_else(bad)?,
            }),
            3 => Ok(Predicate::Superlative {
                largest,
                color: Some(color_from_word(rest[1]).ok_or_else(bad)?),
                kind: kind_from_word(rest[2]).ok_or_else(bad)?,
            }),
            _ => Err(bad()),
        };
    }
    // clock: <kind> in the <digits...> o'clock position
    if rest.len() >= 6 && rest[1] == "in" && rest[2] == "the" {
        let kind = kind_from_word(rest[0]).ok_or_else(bad)?;
        let n = rest.len();
        if rest[n - 2] != "o'clock" || rest[n - 1] != "position" {
            return Err(bad());
        }
        let digits: String = rest[3..n - 2].concat();
        let hour: u32 = digits.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&hour) {
            return Err(bad());
        }
        return Ok(Predicate::Clock { kind, hour });
    }
    // attribute: [color] <kind>
    match rest.len() {
        1 => Ok(Predicate::Attr {
            color: None,
            kind: kind_from_word(rest[0]).ok_or_else(bad)?,
        }),
        2 => Ok(Predicate::Attr {
            color: Some(color_from_word(rest[0]).ok_or_else(bad)?),
            kind: kind_from_word(rest[1]).ok_or_else(bad)?,
        }),
        _ => Err(bad()),
    }
}

/// One training/eval item: a scene plus a uniquely-referring expression,
/// its ground truth, and the supervised reasoning text.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferringSample {
    pub id: usize,
    pub scene: Scene,
    pub expression: Vec<String>,
    pub target_index: usize,
    pub gt_box: [i64; 4],
    pub gt_mask: Mask,
    pub cot_target: Vec<String>,
}

/// Visible mask of shape `idx`: its raster minus everything later shapes
/// paint over it.
pub fn visible_mask(scene: &Scene, idx: usize) -> Result<Mask> {
    let mut m = rasterize_mask(&scene.shapes[idx], scene.width, scene.height)?;
    for later in &scene.shapes[idx + 1..] {
        let occ = rasterize_mask(later, scene.width, scene.height)?;
        for i in 0..m.bits().len() {
            if occ.bits()[i] {
                let (x, y) = (i % scene.width, i / scene.width);
                m.set(x, y, false);
            }
        }
    }
    Ok(m)
}

/// All predicates that uniquely identify some shape of the scene, paired
/// with the shape they select. Uniqueness is established by exhaustively
/// matching every candidate predicate against every shape.
pub fn unique_references(scene: &Scene) -> Vec<(Predicate, usize)> {
    let mut out = Vec::new();
    let mut consider = |p: Predicate| {
        let m = p.matching_shapes(scene);
        if m.len() == 1 {
            out.push((p, m[0]));
        }
    };
    for kind in Kind::ALL {
        consider(Predicate::Attr { color: None, kind });
        for color in Color::ALL {
            consider(Predicate::Attr {
                color: Some(color),
                kind,
            });
        }
        let group: Vec<usize> = (0..scene.shapes.len())
            .filter(|&j| scene.shapes[j].kind == kind)
            .collect();
        if group.len() >= 2 {
            for side in Side::ALL {
                for position in 1..=group.len().min(ORDINALS.len()) {
                    consider(Predicate::Ordinal {
                        position,
                        kind,
                        side,
                    });
                }
            }
            for largest in [true, false] {
                consider(Predicate::Superlative {
                    largest,
                    color: None,
                    kind,
                });
            }
        }
        for color in Color::ALL {
            let cgroup = group
                .iter()
                .filter(|&&j| scene.shapes[j].color == color)
                .count();
            if cgroup >= 2 {
                for largest in [true, false] {
                    consider(Predicate::Superlative {
                        largest,
                        color: Some(color),
                        kind,
                    });
                }
            }
        }
        for hour in 1..=12 {
            consider(Predicate::Clock { kind, hour });
        }
    }
    out
}

/// Draw a referring sample for the scene, or report that no shape is
/// uniquely identifiable so the caller can resample the scene.
pub fn make_sample(scene: &Scene, id: usize, rng: &mut Rng) -> Result<ReferringSample> {
    let candidates: Vec<(Predicate, usize)> = unique_references(scene)
        .into_iter()
        .filter(|&(_, target)| {
            // the target must have a distractor sharing color or kind
            let t = &scene.shapes[target];
            scene
                .shapes
                .iter()
                .enumerate()
                .any(|(j, s)| j != target && (s.kind == t.kind || s.color == t.color))
        })
        .filter(|&(_, target)| {
            visible_mask(scene, target)
                .map(|m| m.count_ones() * 2 >= rasterize_mask(&scene.shapes[target], scene.width, scene.height).map(|f| f.count_ones()).unwrap_or(usize::MAX))
                .unwrap_or(false)
        })
        .collect();
    if candidates.is_empty() {
        return Err(LensError::NoUniqueTarget(scene.seed));
    }
    let (predicate, target_index) = candidates[rng.below(candidates.len())];
    let gt_mask = visible_mask(scene, target_index)?;
    let gt_box = gt_mask.tight_bbox().ok_or(LensError::NoUniqueTarget(scene.seed))?;
    Ok(ReferringSample {
        id,
        scene: scene.clone(),
        expression: predicate.expression_tokens(),
        target_index,
        gt_box,
        gt_mask,
        cot_target: predicate.cot_tokens(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::shapes::{generate_scene, ShapeSpec, WorldConfig};

    fn scene_of(shapes: Vec<ShapeSpec>) -> Scene {
        Scene {
            width: 32,
            height: 32,
            shapes,
            seed: 0,
        }
    }

    fn rect(color: Color, x: usize, y: usize, size: usize) -> ShapeSpec {
        ShapeSpec {
            kind: Kind::Rectangle,
            color,
            x,
            y,
            size,
        }
    }

    #[test]
    fn unique_red_disc_among_blue_rectangles() {
        let scene = scene_of(vec![
            rect(Color::Blue, 1, 1, 5),
            ShapeSpec {
                kind: Kind::Disc,
                color: Color::Red,
                x: 20,
                y: 20,
                size: 7,
            },
            rect(Color::Blue, 10, 1, 5),
        ]);
        let p = Predicate::Attr {
            color: Some(Color::Red),
            kind: Kind::Disc,
        };
        assert_eq!(p.matching_shapes(&scene), vec![1]);
    }

    #[test]
    fn second_rectangle_from_the_left() {
        let scene = scene_of(vec![
            rect(Color::Red, 20, 4, 5),
            rect(Color::Green, 2, 10, 5),
            rect(Color::Blue, 10, 20, 5),
        ]);
        let p = Predicate::Ordinal {
            position: 2,
            kind: Kind::Rectangle,
            side: Side::Left,
        };
        // x coords: 2, 10, 20 -> second from left is x=10, index 2
        assert_eq!(p.matching_shapes(&scene), vec![2]);
    }

    #[test]
    fn ordinal_with_tied_coordinate_matches_nobody() {
        let scene = scene_of(vec![
            rect(Color::Red, 4, 2, 5),
            rect(Color::Green, 4, 20, 5),
        ]);
        let p = Predicate::Ordinal {
            position: 1,
            kind: Kind::Rectangle,
            side: Side::Left,
        };
        assert!(p.matching_shapes(&scene).is_empty());
    }

    #[test]
    fn superlative_requires_strict_extreme() {
        let scene = scene_of(vec![
            rect(Color::Blue, 1, 1, 5),
            rect(Color::Blue, 10, 10, 9),
            rect(Color::Blue, 20, 20, 9),
        ]);
        let largest = Predicate::Superlative {
            largest: true,
            color: Some(Color::Blue),
            kind: Kind::Rectangle,
        };
        assert!(largest.matching_shapes(&scene).is_empty());
        let smallest = Predicate::Superlative {
            largest: false,
            color: Some(Color::Blue),
            kind: Kind::Rectangle,
        };
        assert_eq!(smallest.matching_shapes(&scene), vec![0]);
    }

    #[test]
    fn clock_hours_point_where_expected() {
        // disc centered right of image center -> 3 o'clock
        let scene = scene_of(vec![ShapeSpec {
            kind: Kind::Disc,
            color: Color::Red,
            x: 24,
            y: 13,
            size: 5,
        }]);
        assert_eq!(clock_hour(&scene, 0), Some(3));
        // above center -> 12
        let scene2 = scene_of(vec![ShapeSpec {
            kind: Kind::Disc,
            color: Color::Red,
            x: 13,
            y: 2,
            size: 5,
        }]);
        assert_eq!(clock_hour(&scene2, 0), Some(12));
    }

    #[test]
    fn expression_roundtrips_through_parser() {
        let preds = [
            Predicate::Attr {
                color: Some(Color::Red),
                kind: Kind::Disc,
            },
            Predicate::Attr {
                color: None,
                kind: Kind::Triangle,
            },
            Predicate::Ordinal {
                position: 3,
                kind: Kind::Rectangle,
                side: Side::Bottom,
            },
            Predicate::Superlative {
                largest: true,
                color: Some(Color::Blue),
                kind: Kind::Rectangle,
            },
            Predicate::Superlative {
                largest: false,
                color: None,
                kind: Kind::Disc,
            },
            Predicate::Clock {
                kind: Kind::Disc,
                hour: 3,
            },
            Predicate::Clock {
                kind: Kind::Triangle,
                hour: 12,
            },
        ];
        for p in preds {
            let tokens = p.expression_tokens();
            let parsed = parse_expression(&tokens).unwrap();
            assert_eq!(parsed, p, "{tokens:?}");
        }
    }

    #[test]
    fn every_emitted_sample_is_unique_and_boxed_tight() {
        let cfg = WorldConfig::default();
        let mut made = 0;
        for seed in 0..120u64 {
            let scene = match generate_scene(seed, &cfg) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let mut rng = Rng::new(seed ^ 0x5eed);
            let Ok(sample) = make_sample(&scene, seed as usize, &mut rng) else {
                continue;
            };
            made += 1;
            // uniqueness replay via the expression parser
            let p = parse_expression(&sample.expression).unwrap();
            assert_eq!(p.matching_shapes(&scene), vec![sample.target_index]);
            // gt_box is the tight bbox of gt_mask
            assert_eq!(sample.gt_mask.tight_bbox().unwrap(), sample.gt_box);
            assert!(sample.gt_mask.count_ones() >= 1);
        }
        assert!(made > 80, "only {made} samples made");
    }
}
