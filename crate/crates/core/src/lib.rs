//! Mesh to signed-distance-field to drag-coefficient pipeline.

pub mod augment;
pub mod config;
pub mod evaluation;
pub mod geometry;
pub mod manifest;
pub mod pipeline;
pub mod primitives;
pub mod surrogate;
pub mod synthfleet;
pub mod voxelizer;
