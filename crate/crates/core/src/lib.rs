//! Peak working-memory reduction for DNN inference graphs through fused
//! depthwise tiling (FDT) and fused feature-map tiling (FFMT).
//!
//! The crate is organized as a pipeline:
//!
//! * [`ir`] - the graph model, shape inference and the `.dnn.json` format.
//! * [`fusion`] - operator-fusion overlay deciding which buffers exist.
//! * [`exec`] - reference interpreter and MAC counter.
//! * [`schedule`] - memory-aware operator ordering and buffer lifetimes.
//! * [`layout`] - buffer offset assignment minimizing the arena size.
//! * [`discovery`] - critical buffers and candidate tiling paths.
//! * [`transform`] - rewriting a graph according to a tiling config.
//! * [`explorer`] - the iterative optimize loop tying it all together.
//! * [`modelgen`] - deterministic synthetic models.

pub mod discovery;
pub mod exec;
pub mod explorer;
pub mod fusion;
pub mod ir;
pub mod layout;
pub mod modelgen;
pub mod pipeline;
pub mod schedule;
pub mod transform;

pub use ir::{Graph, GraphError};
