//! Drop-Activation: randomly replacing ReLU units by the identity during
//! training and using the averaged leaky ReLU `(1 - p)·I + p·ReLU` at test time.
//!
//! The crate carries the activation family itself, a small reverse-mode tape
//! for training MLPs, executable checks of the penalized-loss identity and of
//! the batch-norm variance-shift ratio, and desk-scale experiment drivers.

// `!(a < b)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod networks;
pub mod penalty;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod variance_shift;

pub use activations::{ActivationKind, DropMask, MaskSharing, Mode, Realization};
pub use error::{Error, Result};
pub use networks::{LayerSpec, Mlp};
pub use penalty::{OneHiddenNet, SampleSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::{RunRecord, TrainConfig};
pub use variance_shift::{BoxConfig, ShiftRatioReport};
