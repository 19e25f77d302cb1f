//! Multi-scale dynamic graph CNN engine for point-cloud classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode tape and the primitives the
//!   networks need, including fused edge aggregation kernels.
//! * [`dataset`]: point-cloud ingestion, manifests, normalization and class weights.
//! * [`sampling`]: pairwise distances, farthest point sampling and voxel reduction.
//! * [`graph`]: multi-scale k-NN graphs, scale-adaptive edge features and EdgeConv.
//! * [`augment`]: height-aware train-time augmentation.
//! * [`model`]: the hierarchical multi-scale network and its DGCNN / parallel baselines.
//! * [`train`]: weighted loss, Adam, cosine schedule, metrics and the training loop.
//! * [`pipeline`]: the operator-facing commands (preprocess, synth, sweep).

pub mod augment;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod real;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
