//! Neural building blocks on top of the tape: a named parameter store,
//! convolution, batch normalization, linear layers, and untracked
//! functional forms of the same primitives.

pub mod functional;
mod layers;
mod params;

pub use layers::{BatchNorm, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use params::{BnUpdate, Ctx, ParamId, ParamKind, ParamStore};

pub use crate::tape::PoolKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}
