//! Individual-animal re-identification toolkit.
//!
//! The pipeline runs in stages that hand artifacts to each other through
//! files on disk:
//!
//! 1. [`dataset`] ingests a folder-per-individual image collection, filters
//!    undersized classes and assigns a seeded train/val/test split.
//! 2. [`preprocess`] asks a pluggable [`preprocess::Detector`] for the subject
//!    box, squares it with black padding and writes 224x224 PNG crops.
//! 3. [`augment`] builds the seeded train-time transform stack and the
//!    deterministic eval transform.
//! 4. [`modelzoo`] constructs one of the registered CNN backbones with a
//!    classification or embedding head and enforces freeze semantics.
//! 5. [`trainer`] runs the AdamW loop with plateau or step decay and
//!    early stopping, writing checkpoints and `metrics.csv`.
//! 6. [`metriclearn`] holds the triplet objective, triplet mining and the
//!    support-set gallery used for nearest-neighbour identification.
//! 7. [`evaluator`] scores runs on a split and renders the comparison grid.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod imageio;
pub mod metriclearn;
pub mod modelzoo;
pub mod preprocess;
pub mod registry;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Hex of the first 8 bytes of the SHA-256 digest; the short hash recorded
/// in manifests, run dirs and CLI output.
pub fn short_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(bytes)[..8])
}
