//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{glorot_uniform, he_uniform, Bound, ParamId, ParamSet};
pub use tape::{Mode, RunningStats, Tape, Var, BN_EPSILON, BN_MOMENTUM, POOL_EPSILON};
pub use tensor::Tensor;
pub(crate) use tape::pool_block;
