//! Scene geometry: shape specs, rasterization, scene generation, rendering.

use serde::{Deserialize, Serialize};

use super::rle::Mask;
use crate::rng::{derive_seed, tag, Rng};
use crate::{LensError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Rectangle,
    Disc,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Rectangle, Kind::Disc, Kind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Kind::Rectangle => "rectangle",
            Kind::Disc => "disc",
            Kind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// One shape: `size` is the side of its bounding square. Discs and triangles
/// use odd sizes so their geometry lands exactly on pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: Kind,
    pub color: Color,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl ShapeSpec {
    /// Declared extent as [x1, y1, x2, y2], pixel-corner convention.
    pub fn bbox(&self) -> [i64; 4] {
        [
            self.x as i64,
            self.y as i64,
            (self.x + self.size) as i64,
            (self.y + self.size) as i64,
        ]
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.size as f64 / 2.0,
            self.y as f64 + self.size as f64 / 2.0,
        )
    }
}

/// World generation bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Shapes may overlap by at most this fraction of the smaller one's area.
    pub max_overlap: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            min_shapes: 2,
            max_shapes: 6,
            min_size: 5,
            max_size: 13,
            max_overlap: 0.2,
            train_size: 2048,
            heldout_size: 256,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(LensError::Config("image size must be >= 16".into()));
        }
        if self.min_shapes < 2 || self.max_shapes < self.min_shapes {
            return Err(LensError::Config("invalid shape count range".into()));
        }
        if self.min_size < 4 {
            return Err(LensError::Config("shape size must be >= 4".into()));
        }
        if self.max_size + 1 > self.width.min(self.height) {
            return Err(LensError::Config("max shape size exceeds image".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeSpec>,
    pub seed: u64,
}

/// Rasterize one shape onto a width×height grid.
///
/// Rectangle: the filled bounding square. Disc: pixels whose centers lie
/// within the inscribed radius (odd size, integer center). Triangle: filled
/// half-plane intersection of an isoceles triangle (apex top-center, base
/// bottom). Each rasterization has a tight bbox equal to the declared extent.
pub fn rasterize_mask(shape: &ShapeSpec, width: usize, height: usize) -> Result<Mask> {
    if shape.x + shape.size > width || shape.y + shape.size > height {
        return Err(LensError::InvalidArgument(format!(
            "shape at ({}, {}) size {} exceeds {width}x{height}",
            shape.x, shape.y, shape.size
        )));
    }
    let mut m = Mask::new(width, height);
    match shape.kind {
        Kind::Rectangle => {
            for y in shape.y..shape.y + shape.size {
                for x in shape.x..shape.x + shape.size {
                    m.set(x, y, true);
                }
            }
        }
        Kind::Disc => {
            // odd size => integer center and radius (size-1)/2, inclusive
            let r = (shape.size as i64 - 1) / 2;
            let cx = shape.x as i64 + r;
            let cy = shape.y as i64 + r;
            for y in shape.y..shape.y + shape.size {
                for x in shape.x..shape.x + shape.size {
                    let dx = x as i64 - cx;
                    let dy = y as i64 - cy;
                    if dx * dx + dy * dy <= r * r {
                        m.set(x, y, true);
                    }
                }
            }
        }
        Kind::Triangle => {
            // integer-vertex isoceles triangle, inclusive edges
            let s = shape.size as i64;
            let ax = shape.x as i64 + (s - 1) / 2;
            let ay = shape.y as i64;
            let bx = shape.x as i64;
            let by = shape.y as i64 + s - 1;
            let cx = shape.x as i64 + s - 1;
            let cy = by;
            let side = |ux: i64, uy: i64, vx: i64, vy: i64, px: i64, py: i64| -> i64 {
                (vx - ux) * (py - uy) - (vy - uy) * (px - ux)
            };
            for y in shape.y..shape.y + shape.size {
                for x in shape.x..shape.x + shape.size {
                    let (px, py) = (x as i64, y as i64);
                    // inside iff consistently oriented against all three edges
                    let d1 = side(ax, ay, bx, by, px, py);
                    let d2 = side(bx, by, cx, cy, px, py);
                    let d3 = side(cx, cy, ax, ay, px, py);
                    if d1 <= 0 && d2 <= 0 && d3 <= 0 {
                        m.set(x, y, true);
                    }
                }
            }
        }
    }
    Ok(m)
}

/// 3-channel float raster in [0,1], row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>, // h*w*3
}

/// Paint shapes over a black background; later shapes occlude earlier ones.
pub fn render(scene: &Scene) -> Image {
    let (w, h) = (scene.width, scene.height);
    let mut data = vec![0.0f32; w * h * 3];
    for shape in &scene.shapes {
        let mask = rasterize_mask(shape, w, h).expect("scene invariant: shape in bounds");
        let rgb = shape.color.rgb();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    let base = (y * w + x) * 3;
                    data[base] = rgb[0];
                    data[base + 1] = rgb[1];
                    data[base + 2] = rgb[2];
                }
            }
        }
    }
    Image {
        width: w,
        height: h,
        data,
    }
}

fn overlap_ok(masks: &[Mask], candidate: &Mask, max_overlap: f64) -> bool {
    let cand_area = candidate.count_ones();
    for m in masks {
        let inter = m
            .bits()
            .iter()
            .zip(candidate.bits())
            .filter(|(&a, &b)| a && b)
            .count();
        let smaller = cand_area.min(m.count_ones());
        if inter as f64 > max_overlap * smaller as f64 {
            return false;
        }
    }
    true
}

const PLACEMENT_TRIES: usize = 64;

/// Deterministically generate a scene: identical (seed, config) gives an
/// identical scene. Guarantees at least one pair of shapes sharing color or
/// kind, and bounded pairwise overlap.
pub fn generate_scene(seed: u64, config: &WorldConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = Rng::new(derive_seed(seed, &[tag("scene")]));
    let n_shapes = rng.range_inclusive(config.min_shapes, config.max_shapes);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(n_shapes);
    let mut masks: Vec<Mask> = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let kind = Kind::ALL[rng.below(3)];
            let color = if i > 0 && rng.next_f64() < 0.5 {
                // bias towards sharing an attribute with an earlier shape
                shapes[rng.below(i)].color
            } else {
                Color::ALL[rng.below(4)]
            };
            let mut size = rng.range_inclusive(config.min_size, config.max_size);
            if matches!(kind, Kind::Disc | Kind::Triangle) && size % 2 == 0 {
                size -= 1;
            }
            let x = rng.below(config.width - size + 1);
            let y = rng.below(config.height - size + 1);
            let candidate = ShapeSpec {
                kind,
                color,
                x,
                y,
                size,
            };
            let mask = rasterize_mask(&candidate, config.width, config.height)?;
            if overlap_ok(&masks, &mask, config.max_overlap) {
                shapes.push(candidate);
                masks.push(mask);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LensError::Placement(PLACEMENT_TRIES));
        }
    }
    // ensure some pair shares kind or color, so expressions must disambiguate
    let shares = |a: &ShapeSpec, b: &ShapeSpec| a.kind == b.kind || a.color == b.color;
    let any_shared = shapes
        .iter()
        .enumerate()
        .any(|(i, a)| shapes.iter().skip(i + 1).any(|b| shares(a, b)));
    if !any_shared {
        let idx = rng.below(shapes.len());
        let donor = shapes[idx];
        for j in 0..shapes.len() {
            if j != idx {
                shapes[j].color = donor.color;
                break;
            }
        }
    }
    Ok(Scene {
        width: config.width,
        height: config.height,
        shapes,
        seed,
    })
}
