//! Differentiable spatial sampling for fast scene understanding.
//!
//! This crate holds the pure numerical core: a small rank-4 tensor with a
//! reverse-mode [`Tape`], the guided sampling operators and the improved
//! guided upsampling module built on them, instance segmentation by iterated
//! sampling, the lightweight non-bottleneck encoder, segmentation metrics,
//! a synthetic scene generator and the Adam optimizer.
//!
//! It is `no_std` (with `alloc`). File formats, the training loop driver
//! and the command line live in the `ssnet` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

mod error;
mod gemm;
mod math;

pub mod conv;
pub mod gradcheck;
pub mod igum;
pub mod instance;
pub mod meanshift;
pub mod metrics;
pub mod model;
pub mod net;
pub mod optim;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Train/eval switch shared by batch normalization, dropout and the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
