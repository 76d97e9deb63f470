//! GO-term annotation of protein sequences with three aspect-specific
//! transformer encoders.
//!
//! The pipeline runs ingest → split → pretrain (masked residues) →
//! fine-tune (multi-label) → fused prediction → evaluation.

pub mod fusion;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod splitter;
pub mod train;
