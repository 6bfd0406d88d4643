//! Datasets, degradations and unpaired sampling.

pub mod degrade;
pub mod image;
pub mod manifest;
pub mod sampler;
pub mod synth;

pub use degrade::{DegradationKind, DegradationSpec};
pub use image::{to_batch, RgbImage};
pub use manifest::{build_manifest, DatasetManifest, Domain, ManifestEntry};
pub use sampler::{sample_unpaired_batch, UnpairedBatch, UnpairedSampler};
