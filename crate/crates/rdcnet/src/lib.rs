//! RDCNet: an image-classification network built from random-masked dilated
//! convolutions (MRDC), fine-grained feature enhancement (FGFE) and context
//! excitation (CE), together with the minimal reverse-mode tensor engine,
//! data pipeline and training loop needed to run it end to end on CPU.
//!
//! The crate is organized around the value types it computes with:
//!
//! - [`tensor`] — dense N-d tensors, deterministic RNG, and a Wengert tape
//!   for reverse-mode differentiation.
//! - [`nn`] — convolution (direct + im2col), batch norm, pooling, bilinear
//!   upsampling and the linear head, all recorded on the tape.
//! - [`mask`] — stochastic channel/kernel masking applied before dilated
//!   convolutions.
//! - [`blocks`] — the MRDC / FGFE / CE modules, the pooling residual block,
//!   and the five-stage network builder.
//! - [`train`] — SGD with momentum, weight decay, label-smoothed cross
//!   entropy, cosine annealing, and the augmentation pipeline.
//! - [`data`] — CIFAR-10/100 binary parsing, a synthetic shape dataset and
//!   the batcher.
//! - [`config`] — the flat-key run configuration format shared by the CLI
//!   and run manifests.
//! - [`verify`] — self-check suites (shapes, oracles, gradients, masks,
//!   schedule, attention) used by `rdcnet verify` and the test suite.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use mask::{MaskConfig, MaskStrategy};
pub use tensor::{Elem, Rng, Tape, Tensor, Var};

/// RNG stream ids reserved by the crate. Per-layer mask draws use
/// [`mask::MASK_STREAM_BASE`] and up; everything else lives below 16.
pub mod streams {
    /// Parameter initialization.
    pub const INIT: u64 = 0;
    /// Per-epoch batch shuffling.
    pub const SHUFFLE: u64 = 1;
    /// Per-image augmentation draws.
    pub const AUGMENT: u64 = 2;
    /// Synthetic dataset generation.
    pub const SYNTH: u64 = 3;
}

/// Training / inference mode switch shared by batch norm, masking and the
/// block forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
