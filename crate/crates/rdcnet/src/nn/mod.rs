//! Neural-net kernels as pure tensor functions.
//!
//! Everything here is stateless math on [`crate::tensor::Tensor`] values:
//! forward kernels plus matching backward kernels. The tape ops in
//! [`crate::tensor`] dispatch into these, and the unit tests exercise them
//! directly against slow reference implementations.

pub mod conv;
pub mod gemm;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::ConvSpec;
pub use norm::BnTrainOut;

use crate::tensor::{Elem, Tape, Var};

/// Factorized 5×5 receptive field: a 1×5 pass (padding (0,2)) followed by
/// a 5×1 pass (padding (2,0)), both stride 1, so (H,W) is preserved.
pub fn conv2d_asym<T: Elem>(tape: &mut Tape<T>, x: Var, w_1x5: Var, w_5x1: Var) -> Var {
    let first = tape.conv2d(x, w_1x5, ConvSpec::with_pads(1, 0, 2, 1));
    tape.conv2d(first, w_5x1, ConvSpec::with_pads(1, 2, 0, 1))
}
