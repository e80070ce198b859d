//! Synthetic data generation, manifests, image files and batching.

mod dataset;
mod generate;
mod manifest;
pub mod png;
pub mod synth;

pub use dataset::{batch_order, make_batches, Batch, Dataset, Sample};
pub use generate::{generate_synthetic, image_name, ingest_folder, outline_name, SynthOptions, MANIFEST_NAME};
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord};
