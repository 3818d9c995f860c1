//! Random feature masking for the dilated branches.
//!
//! During training, a masked convolution sees its input censored before
//! the kernel is applied: whole channels may be dropped (mask shaped
//! `[C,1,1]`), then single positions of the surviving feature map (mask
//! shaped `[C,H,W]`). Both masks broadcast over the batch axis, so every
//! sample in a step shares the same mask, and an element survives with
//! probability `tau` independently. Kept values pass through unscaled:
//! there is no `1/tau` compensation, the network is expected to adapt.
//!
//! Masks are drawn from `Rng::for_step(seed, stream, step)` with one
//! stream per masked layer, which makes any mask reproducible from the run
//! seed alone and independent of evaluation order.
//!
//! In eval mode masking is skipped entirely: the layer must be the exact
//! identity on its input, not an approximation of it.

use crate::nn::ConvSpec;
use crate::tensor::{Elem, Rng, Tape, Tensor, Var};
use crate::{Error, Mode, Result};

/// First mask stream; masked layer i draws from `MASK_STREAM_BASE + i`.
pub const MASK_STREAM_BASE: u64 = 16;

/// Which censoring steps a masked convolution applies in train mode.
///
/// `ChannelKernel` composes both censorings (channels first, then
/// positions) and is the default; `Null` keeps the dilated convolution but
/// never masks, which is the ablation baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskStrategy {
    Null,
    Channel,
    Kernel,
    #[default]
    ChannelKernel,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "null_mask" => Some(MaskStrategy::Null),
            "c_mask" => Some(MaskStrategy::Channel),
            "k_mask" => Some(MaskStrategy::Kernel),
            "c_k_mask" => Some(MaskStrategy::ChannelKernel),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Null => "null_mask",
            MaskStrategy::Channel => "c_mask",
            MaskStrategy::Kernel => "k_mask",
            MaskStrategy::ChannelKernel => "c_k_mask",
        }
    }

    fn masks_channels(self) -> bool {
        matches!(self, MaskStrategy::Channel | MaskStrategy::ChannelKernel)
    }

    fn masks_positions(self) -> bool {
        matches!(self, MaskStrategy::Kernel | MaskStrategy::ChannelKernel)
    }
}

/// Masking policy of one layer: what to censor, how much to keep, and
/// which rng stream the draws come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub tau: f64,
    pub stream: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            strategy: MaskStrategy::default(),
            tau: 0.9,
            stream: MASK_STREAM_BASE,
        }
    }
}

impl MaskConfig {
    pub fn new(strategy: MaskStrategy, tau: f64, stream: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
            return Err(Error::config(format!(
                "mask retention tau must lie in [0,1], got {tau}"
            )));
        }
        Ok(MaskConfig {
            strategy,
            tau,
            stream,
        })
    }
}

fn bernoulli_keep<T: Elem>(shape: &[usize], tau: f64, rng: &mut Rng) -> Tensor<T> {
    assert!(
        (0.0..=1.0).contains(&tau),
        "keep probability {tau} outside [0,1]"
    );
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            if rng.uniform() < tau {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Channel keep-mask `[C,1,1]`: an entire channel is either intact or zero.
pub fn channel_mask<T: Elem>(c: usize, tau: f64, rng: &mut Rng) -> Tensor<T> {
    bernoulli_keep(&[c, 1, 1], tau, rng)
}

/// Positionwise keep-mask `[C,H,W]` over the whole feature map.
pub fn kernel_mask<T: Elem>(c: usize, h: usize, w: usize, tau: f64, rng: &mut Rng) -> Tensor<T> {
    bernoulli_keep(&[c, h, w], tau, rng)
}

/// Applies the configured masks to a `[N,C,H,W]` activation. Draw order is
/// fixed: channel mask first, then kernel mask, so a given `(seed, stream,
/// step)` cell always produces the same censoring. Eval mode returns `x`
/// untouched.
pub fn apply_masks<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &MaskConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Var {
    if mode == Mode::Eval || cfg.strategy == MaskStrategy::Null {
        return x;
    }
    let sh = tape.shape(x).to_vec();
    assert_eq!(sh.len(), 4, "mask target must be [N,C,H,W]");
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let mut out = x;
    if cfg.strategy.masks_channels() {
        let m = tape.constant(channel_mask::<T>(c, cfg.tau, rng));
        out = tape.mul(out, m);
    }
    if cfg.strategy.masks_positions() {
        let m = tape.constant(kernel_mask::<T>(c, h, w, cfg.tau, rng));
        out = tape.mul(out, m);
    }
    out
}

/// Dilated convolution over a randomly censored input. The spec of the
/// convolution is constrained: dilation must be at least 2 (otherwise this
/// is just a plain conv and masking belongs elsewhere) and padding must
/// equal the dilation on both axes so that a 3x3 kernel preserves
/// resolution.
pub fn masked_dilated_conv<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    spec: ConvSpec,
    cfg: &MaskConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    if spec.dil < 2 {
        return Err(Error::config(format!(
            "masked dilated conv needs dilation >= 2, got {}",
            spec.dil
        )));
    }
    if spec.pad_h != spec.dil || spec.pad_w != spec.dil {
        return Err(Error::config(format!(
            "masked dilated conv needs padding == dilation ({}), got ({}, {})",
            spec.dil, spec.pad_h, spec.pad_w
        )));
    }
    let masked = apply_masks(tape, x, cfg, mode, rng);
    Ok(tape.conv2d(masked, w, spec))
}
