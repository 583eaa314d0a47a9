//! Desk-scale FANet: a frequency-aware segmentation backbone built on a small
//! tape-based autodiff engine, together with a procedural cluttered-scene
//! benchmark and a deterministic training and ablation harness.

pub mod checks;
pub mod data;
pub mod enhance;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FANetConfig, HeadConfig, Segmenter, Variant};
pub use tensor::{ConvSpec, Graph, Tensor, Var};
