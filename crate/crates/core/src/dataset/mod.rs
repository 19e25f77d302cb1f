//! Point-cloud ingestion, manifests, normalization and class weighting.

mod cloud;
mod manifest;
mod packed;
mod weights;

pub use cloud::{load_cloud, normalize_unit_sphere, parse_xyz, write_xyz, CloudFormat, PointCloudSample};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use packed::{read_packed, read_packed_file, write_packed, write_packed_file, PACKED_MAGIC};
pub use weights::{compute_class_weights, ClassWeights};

/// Smallest cloud the pipeline accepts.
pub const MIN_POINTS: usize = 4;
