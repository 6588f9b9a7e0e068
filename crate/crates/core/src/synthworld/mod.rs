//! Deterministic synthetic referring-segmentation world: colored shapes on
//! a raster, templated expressions with verified referential uniqueness,
//! ground-truth boxes/masks, and a lossless JSONL dataset format.

mod dataset;
mod rle;
mod sample;
mod shapes;

pub use dataset::{build_split, export_dataset, import_dataset};
pub use rle::Mask;
pub use sample::{
    clock_hour, make_sample, parse_expression, unique_references, visible_mask, Predicate,
    ReferringSample, Side,
};
pub use shapes::{
    generate_scene, rasterize_mask, render, Color, Image, Kind, Scene, ShapeSpec, WorldConfig,
};
