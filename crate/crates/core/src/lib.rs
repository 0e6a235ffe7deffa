//! Core algorithms for tree-structured, parameter-shared neural ensembles
//! with anytime (budgeted, interruptible) inference.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation.
//! Dataset handling, checkpoints, and the command-line interface live in the
//! companion `hne` crate.
//!
//! Layout:
//!
//! - [`tensor`]: dense row-major tensors over `f32`/`f64` (the 64-bit mode is
//!   used for gradient verification).
//! - [`autodiff`]: a tape-based reverse-mode engine with grouped
//!   (block-diagonal) linear maps, small 2-D convolutions, batch
//!   normalization, and numerically stable classification losses.
//! - [`tree`]: the binary-tree architecture, node identity, parameter
//!   storage, and sub-ensemble selection.
//! - [`eval`]: per-model and prefix-ensemble outputs computed three
//!   interchangeable ways (sequential, packed, incremental).
//! - [`losses`]: the four training objectives and the logit-diversity metric.
//! - [`cost`]: operation counting and the analytic complexity ratio.
//! - [`optim`]: SGD with momentum/weight decay and the cosine schedule.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod tree;

mod blocks;
mod kernels;

pub use blocks::{NORM_EPS, NORM_MOMENTUM};
pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
