//! Structure inference for object detection at toy scale.
//!
//! Objects are graph nodes carrying GRU memory; the whole scene and pairwise
//! object relations each send messages that update that memory. The crate
//! contains the graph model, a small detector built around it, a procedural
//! benchmark with planted context structure, and the evaluation tooling used
//! to compare ablation arms.

pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod memory_cell;
pub mod numerics;
pub mod structure_inference;
pub mod synth_data;

pub use error::{Error, Result};
