//! Procedural cluttered-scene benchmark and its on-disk format.

mod dataset;
pub mod netpbm;
mod synth;

pub use dataset::{
    generate_split, split_dir, to_sorted_json, Dataset, Manifest, ManifestEntry, Split, MANIFEST,
};
pub use synth::{
    class_hue, generate_scene, hsv_to_rgb, Canvas, ObjectMeta, SceneSample, SceneSpec, Shape,
};
