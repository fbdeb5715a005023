//! Loop closure detection for 3D LiDAR scans.

pub mod descriptor;
pub mod engine;
pub mod ingest;
pub mod eval;
pub mod retrieval;
pub mod synth;
pub mod verify;
