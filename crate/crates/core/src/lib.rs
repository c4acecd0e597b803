//! Sparse mixture-of-experts superpoint transformer.
//!
//! The crate is split along the data flow of the model:
//!
//! - [`numerics`]: dense 2-D tensors, a reverse-mode autodiff tape and a FLOP ledger.
//! - [`scene`]: point clouds, voxelization, superpoint partitions, the synthetic
//!   scene generator and the on-disk container format.
//! - [`encoder`]: per-voxel feature extractor, superpoint pooling and the prompt
//!   aggregator.
//! - [`moe`]: gating, top-K routing, expert dispatch, router regularizers.
//! - [`model`]: the transformer with interleaved dense/MoE blocks, the information
//!   aggregation module and the prediction heads.
//! - [`losses`] and [`metrics`]: training objectives and mIoU.
//! - [`train`]: AdamW, schedules, the three training stages, gradient checking and
//!   checkpoints.

pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
