//! Dense tensors, reverse-mode autodiff and FLOP accounting.

pub mod flops;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use flops::{FlopKind, FlopLedger};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Mode, Tape, Var};
pub use tensor::{FeatureMatrix, Tensor};
