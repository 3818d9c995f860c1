//! Architectural units and the network builder.
//!
//! The network is a five-stage residual classifier. A stem adapts the
//! input resolution, four stages of residual blocks follow, and a global
//! average pool plus linear head produce logits. Inside each block the
//! second convolution of the classic two-conv residual layout is replaced
//! by a four-branch module ([`Mrdc`]) whose dilated branches see randomly
//! censored inputs during training, and stages can be capped with a
//! spatial-attention channel gate ([`Ce`]).
//!
//! All parameters live in a [`ParamStore`] under hierarchical names
//! (`stage2.block0.fuse.weight`, `ce4.key.weight`, ...) so checkpoints,
//! the optimizer and the inspector all share one addressing scheme.

use crate::mask::{masked_dilated_conv, MaskConfig, MASK_STREAM_BASE};
use crate::nn::{conv2d_asym, norm, ConvSpec};
use crate::tensor::{Elem, ParamId, ParamKind, ParamStore, Rng, Tape, Tensor, Var};
use crate::{Error, Mode, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ── convolution + batch norm unit ────────────────────────────────

/// A convolution followed by batch norm. In train mode the normalization
/// uses batch statistics and folds them into the running averages; in eval
/// mode it is a fixed per-channel affine built from the running averages.
/// No activation is applied here — callers decide.
pub struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    rmean: ParamId,
    rvar: ParamId,
    spec: ConvSpec,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::he_normal(&[cout, cin, kh, kw], cin * kh * kw, rng),
        );
        let gamma = store.add(
            &format!("{name}.bn.gamma"),
            ParamKind::BnGamma,
            Tensor::ones(&[cout]),
        );
        let beta = store.add(
            &format!("{name}.bn.beta"),
            ParamKind::BnBeta,
            Tensor::zeros(&[cout]),
        );
        let rmean = store.add(
            &format!("{name}.bn.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[cout]),
        );
        let rvar = store.add(
            &format!("{name}.bn.running_var"),
            ParamKind::Buffer,
            Tensor::ones(&[cout]),
        );
        ConvBn {
            w,
            gamma,
            beta,
            rmean,
            rvar,
            spec,
        }
    }

    fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.conv2d(x, w, self.spec);
        match mode {
            Mode::Train => {
                let gamma = tape.param(store, self.gamma);
                let beta = tape.param(store, self.beta);
                let (z, stats) = tape.bn_train(y, gamma, beta, BN_EPS)?;
                let m = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - m;
                let rm = store.get_mut(self.rmean).value.data_mut();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                let rv = store.get_mut(self.rvar).value.data_mut();
                for (r, &b) in rv.iter_mut().zip(&stats.var_unbiased) {
                    *r = keep * *r + m * b;
                }
                Ok(z)
            }
            Mode::Eval => {
                let (scale, shift) = norm::bn_eval_affine(
                    store.value(self.gamma).data(),
                    store.value(self.beta).data(),
                    store.value(self.rmean).data(),
                    store.value(self.rvar).data(),
                    BN_EPS,
                );
                let c = scale.len();
                let sc = tape.constant(Tensor::from_vec(&[c, 1, 1], scale));
                let sh = tape.constant(Tensor::from_vec(&[c, 1, 1], shift));
                let scaled = tape.mul(y, sc);
                Ok(tape.add(scaled, sh))
            }
        }
    }
}

// ── global-context branch ────────────────────────────────────────

/// Squeezes the feature map to 1×1 by global average pooling, transforms
/// it (1×1 conv + BN + ReLU), and broadcasts the result back to the input
/// resolution with bilinear resizing. Because the source is a single
/// pixel, the output is spatially constant per (sample, channel).
pub struct Fgfe {
    conv: ConvBn,
}

impl Fgfe {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, c: usize) -> Self {
        Fgfe {
            conv: ConvBn::new(store, rng, name, c, c, 1, 1, ConvSpec::new(1, 0, 1)),
        }
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let sh = tape.shape(x);
        let (h, w) = (sh[2], sh[3]);
        let g = tape.global_avg_pool(x);
        let y = self.conv.forward(tape, store, g, mode)?;
        let r = tape.relu(y);
        Ok(tape.bilinear(r, h, w))
    }
}

// ── four-branch module ───────────────────────────────────────────

/// The masked multi-branch unit. The input is split into channel
/// quarters, each quarter flows through its own branch, and the
/// concatenated result is fused by a 1×1 conv + BN, scaled by a learnable
/// gain `alpha`, and added back to the input:
///
/// - branch 1: plain 3×3 conv (stability anchor);
/// - branch 2: masked dilated 3×3 (d=2) then a refining 3×3;
/// - branch 3: masked dilated 3×3 (d=3) then factorized 1×5 / 5×1;
/// - branch 4: global-context branch ([`Fgfe`]).
///
/// Every branch maps c/4 → c/4 channels and preserves (h, w). With
/// `alpha = 0` the whole module is exactly the identity.
pub struct Mrdc {
    name: String,
    c: usize,
    b1_w: ParamId,
    b2_dil_w: ParamId,
    b2_ref_w: ParamId,
    b3_dil_w: ParamId,
    b3_row_w: ParamId,
    b3_col_w: ParamId,
    b4: Fgfe,
    fuse: ConvBn,
    alpha: ParamId,
    b2_stream: u64,
    b3_stream: u64,
}

impl Mrdc {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c: usize,
        alpha_init: f64,
        alpha_learnable: bool,
        streams: (u64, u64),
    ) -> Result<Self> {
        if !c.is_multiple_of(4) || c < 4 {
            return Err(Error::config(format!(
                "{name}: channel count {c} is not divisible into four branch groups"
            )));
        }
        let q = c / 4;
        let qconv = |store: &mut ParamStore<T>, rng: &mut Rng, n: &str, kh: usize, kw: usize| {
            store.add(
                &format!("{name}.{n}.weight"),
                ParamKind::Weight,
                Tensor::he_normal(&[q, q, kh, kw], q * kh * kw, rng),
            )
        };
        let b1_w = qconv(store, rng, "b1", 3, 3);
        let b2_dil_w = qconv(store, rng, "b2.dilated", 3, 3);
        let b2_ref_w = qconv(store, rng, "b2.refine", 3, 3);
        let b3_dil_w = qconv(store, rng, "b3.dilated", 3, 3);
        let b3_row_w = qconv(store, rng, "b3.row", 1, 5);
        let b3_col_w = qconv(store, rng, "b3.col", 5, 1);
        let b4 = Fgfe::new(store, rng, &format!("{name}.b4"), q);
        let fuse = ConvBn::new(
            store,
            rng,
            &format!("{name}.fuse"),
            c,
            c,
            1,
            1,
            ConvSpec::new(1, 0, 1),
        );
        let alpha = store.add(
            &format!("{name}.alpha"),
            ParamKind::BlockGain,
            Tensor::from_vec(&[1], vec![T::from_f64(alpha_init)]),
        );
        if !alpha_learnable {
            store.set_trainable(alpha, false);
        }
        Ok(Mrdc {
            name: name.to_string(),
            c,
            b1_w,
            b2_dil_w,
            b2_ref_w,
            b3_dil_w,
            b3_row_w,
            b3_col_w,
            b4,
            fuse,
            alpha,
            b2_stream: streams.0,
            b3_stream: streams.1,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mask: &MaskConfig,
        mode: Mode,
        seed: u64,
        step: u64,
    ) -> Result<Var> {
        let q = self.c / 4;
        assert_eq!(tape.shape(x)[1], self.c, "{}: channel mismatch", self.name);
        let f1 = tape.slice_channels(x, 0, q);
        let f2 = tape.slice_channels(x, q, q);
        let f3 = tape.slice_channels(x, 2 * q, q);
        let f4 = tape.slice_channels(x, 3 * q, q);

        let w1 = tape.param(store, self.b1_w);
        let y1 = tape.conv2d(f1, w1, ConvSpec::new(1, 1, 1));

        let w2d = tape.param(store, self.b2_dil_w);
        let cfg2 = MaskConfig {
            stream: self.b2_stream,
            ..*mask
        };
        let mut rng2 = Rng::for_step(seed, self.b2_stream, step);
        let y2 = masked_dilated_conv(
            tape,
            f2,
            w2d,
            ConvSpec::new(1, 2, 2),
            &cfg2,
            mode,
            &mut rng2,
        )?;
        let w2r = tape.param(store, self.b2_ref_w);
        let y2 = tape.conv2d(y2, w2r, ConvSpec::new(1, 1, 1));

        let w3d = tape.param(store, self.b3_dil_w);
        let cfg3 = MaskConfig {
            stream: self.b3_stream,
            ..*mask
        };
        let mut rng3 = Rng::for_step(seed, self.b3_stream, step);
        let y3 = masked_dilated_conv(
            tape,
            f3,
            w3d,
            ConvSpec::new(1, 3, 3),
            &cfg3,
            mode,
            &mut rng3,
        )?;
        let w15 = tape.param(store, self.b3_row_w);
        let w51 = tape.param(store, self.b3_col_w);
        let y3 = conv2d_asym(tape, y3, w15, w51);

        let y4 = self.b4.forward(tape, store, f4, mode)?;

        let cat = tape.concat_channels(&[y1, y2, y3, y4]);
        let fused = self.fuse.forward(tape, store, cat, mode)?;
        let a = tape.param(store, self.alpha);
        let scaled = tape.mul(fused, a);
        Ok(tape.add(scaled, x))
    }
}

// ── spatial-attention channel gate ───────────────────────────────

/// Intermediate tensors of one attention pass, exposed for the
/// verification suite: `saliency` is the per-position probability map,
/// `summary` the attention-weighted channel descriptor, `gate` the final
/// per-channel multiplier in (0,1).
pub struct CeTrace {
    pub saliency: Var,
    pub summary: Var,
    pub gate: Var,
    pub out: Var,
}

/// Context gate: a 1×1 conv scores every position, softmax over all H·W
/// positions turns the scores into a probability map, and the
/// attention-weighted spatial sum of the features gives one descriptor per
/// channel. A bottleneck (1×1 down to C/r, ReLU, 1×1 up, sigmoid) maps the
/// descriptor to a per-channel gate that rescales the input.
///
/// The convolutions carry no biases, so zero bottleneck weights gate every
/// channel at exactly sigmoid(0) = 0.5.
pub struct Ce {
    key_w: ParamId,
    down_w: ParamId,
    up_w: ParamId,
}

impl Ce {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c: usize,
        r: usize,
    ) -> Result<Self> {
        if r == 0 || c < r {
            return Err(Error::config(format!(
                "{name}: reduction ratio {r} exceeds channel count {c}"
            )));
        }
        if !c.is_multiple_of(r) {
            return Err(Error::config(format!(
                "{name}: channel count {c} not divisible by reduction ratio {r}"
            )));
        }
        let key_w = store.add(
            &format!("{name}.key.weight"),
            ParamKind::Weight,
            Tensor::he_normal(&[1, c, 1, 1], c, rng),
        );
        let down_w = store.add(
            &format!("{name}.down.weight"),
            ParamKind::Weight,
            Tensor::he_normal(&[c / r, c, 1, 1], c, rng),
        );
        let up_w = store.add(
            &format!("{name}.up.weight"),
            ParamKind::Weight,
            Tensor::he_normal(&[c, c / r, 1, 1], c / r, rng),
        );
        Ok(Ce {
            key_w,
            down_w,
            up_w,
        })
    }

    pub fn forward_traced<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> CeTrace {
        let pw = ConvSpec::new(1, 0, 1);
        let k = tape.param(store, self.key_w);
        let scores = tape.conv2d(x, k, pw); // [N,1,H,W]
        let saliency = tape.softmax_spatial(scores);
        let weighted = tape.mul(x, saliency); // broadcast over C
        let summary = tape.sum_spatial(weighted); // [N,C,1,1]
        let d = tape.param(store, self.down_w);
        let mid = tape.conv2d(summary, d, pw);
        let mid = tape.relu(mid);
        let u = tape.param(store, self.up_w);
        let raised = tape.conv2d(mid, u, pw);
        let gate = tape.sigmoid(raised); // [N,C,1,1]
        let out = tape.mul(x, gate);
        CeTrace {
            saliency,
            summary,
            gate,
            out,
        }
    }

    pub fn forward<T: Elem>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.forward_traced(tape, store, x).out
    }
}

// ── residual block ───────────────────────────────────────────────

/// What sits on the main path after the block's first convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MainKind {
    /// The four-branch masked module (the default).
    Mrdc,
    /// A plain 3×3 conv + BN, for ablation baselines.
    Plain,
}

impl MainKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mrdc" => Some(MainKind::Mrdc),
            "plain" => Some(MainKind::Plain),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MainKind::Mrdc => "mrdc",
            MainKind::Plain => "plain",
        }
    }
}

enum MainPath {
    Mrdc(Mrdc),
    Plain(ConvBn),
}

/// Residual block `H(x) = M(f(x)) + g(x)`: `f` is a 3×3 conv + BN + ReLU
/// (stride 2 when downsampling), `M` the main-path module, and the skip
/// `g` is the identity — or, when downsampling, a 2×2 stride-2 average
/// pool followed by a 1×1 conv + BN to match the doubled width. No
/// activation follows the addition.
pub struct Block {
    f: ConvBn,
    main: MainPath,
    skip: Option<ConvBn>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        kind: MainKind,
        alpha_init: f64,
        alpha_learnable: bool,
        next_stream: &mut u64,
    ) -> Result<Self> {
        assert!(
            downsample || cin == cout,
            "{name}: width change requires downsampling"
        );
        let stride = if downsample { 2 } else { 1 };
        let f = ConvBn::new(
            store,
            rng,
            &format!("{name}.f"),
            cin,
            cout,
            3,
            3,
            ConvSpec::new(stride, 1, 1),
        );
        let main = match kind {
            MainKind::Mrdc => {
                let streams = (*next_stream, *next_stream + 1);
                *next_stream += 2;
                MainPath::Mrdc(Mrdc::new(
                    store,
                    rng,
                    &format!("{name}.main"),
                    cout,
                    alpha_init,
                    alpha_learnable,
                    streams,
                )?)
            }
            MainKind::Plain => MainPath::Plain(ConvBn::new(
                store,
                rng,
                &format!("{name}.main"),
                cout,
                cout,
                3,
                3,
                ConvSpec::new(1, 1, 1),
            )),
        };
        let skip = downsample.then(|| {
            ConvBn::new(
                store,
                rng,
                &format!("{name}.skip"),
                cin,
                cout,
                1,
                1,
                ConvSpec::new(1, 0, 1),
            )
        });
        Ok(Block { f, main, skip })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mask: &MaskConfig,
        mode: Mode,
        seed: u64,
        step: u64,
    ) -> Result<Var> {
        let y = self.f.forward(tape, store, x, mode)?;
        let y = tape.relu(y);
        let m = match &self.main {
            MainPath::Mrdc(m) => m.forward(tape, store, y, mask, mode, seed, step)?,
            MainPath::Plain(p) => p.forward(tape, store, y, mode)?,
        };
        let g = match &self.skip {
            None => x,
            Some(s) => {
                let pooled = tape.avg_pool(x, 2, 2);
                s.forward(tape, store, pooled, mode)?
            }
        };
        Ok(tape.add(m, g))
    }
}

// ── network ──────────────────────────────────────────────────────

/// Input-resolution regime of the stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stem {
    /// 3×3 stride-1 conv, no pooling: resolution is kept (32×32-class inputs).
    SmallInput,
    /// 7×7 stride-2 conv + 3×3 stride-2 max pool: resolution quartered
    /// (224×224-class inputs).
    LargeInput,
}

impl Stem {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small_input" => Some(Stem::SmallInput),
            "large_input" => Some(Stem::LargeInput),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stem::SmallInput => "small_input",
            Stem::LargeInput => "large_input",
        }
    }
}

/// Everything needed to build a network. The defaults describe the full
/// model: four stages of [3,4,6,3] blocks at widths [64,128,256,512], the
/// gate after stage 4, combined masking at tau 0.9, and a learnable fusion
/// gain starting at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub stem: Stem,
    pub block_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub input_channels: usize,
    pub mask: MaskConfig,
    pub alpha_init: f64,
    pub alpha_learnable: bool,
    /// Stages (1-based) that get a context gate after their last block.
    pub ce_placements: Vec<usize>,
    pub ce_reduction: usize,
    pub main: MainKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stem: Stem::SmallInput,
            block_counts: vec![3, 4, 6, 3],
            widths: vec![64, 128, 256, 512],
            classes: 10,
            input_channels: 3,
            mask: MaskConfig::default(),
            alpha_init: 0.5,
            alpha_learnable: true,
            ce_placements: vec![4],
            ce_reduction: 16,
            main: MainKind::Mrdc,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_counts.len() != 4 {
            return Err(Error::config(format!(
                "expected 4 per-stage block counts, got {}",
                self.block_counts.len()
            )));
        }
        if self.widths.len() != 4 {
            return Err(Error::config(format!(
                "expected 4 per-stage widths, got {}",
                self.widths.len()
            )));
        }
        if let Some(n) = self.block_counts.iter().find(|&&n| n == 0) {
            return Err(Error::config(format!(
                "stage block count must be >= 1, got {n}"
            )));
        }
        for &w in &self.widths {
            if w % 4 != 0 || w == 0 {
                return Err(Error::config(format!(
                    "stage width {w} is not divisible into four branch groups"
                )));
            }
        }
        if self.classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::config(
                "input channel count must be >= 1".to_string(),
            ));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::config(format!(
                "fusion gain init {} not finite",
                self.alpha_init
            )));
        }
        if !(0.0..=1.0).contains(&self.mask.tau) || !self.mask.tau.is_finite() {
            return Err(Error::config(format!(
                "mask retention tau must lie in [0,1], got {}",
                self.mask.tau
            )));
        }
        let mut seen = [false; 4];
        for &p in &self.ce_placements {
            if !(1..=4).contains(&p) {
                return Err(Error::config(format!(
                    "context-gate placement {p} outside stages 1..=4"
                )));
            }
            if seen[p - 1] {
                return Err(Error::config(format!(
                    "duplicate context-gate placement {p}"
                )));
            }
            seen[p - 1] = true;
            let c = self.widths[p - 1];
            if self.ce_reduction == 0
                || c < self.ce_reduction
                || !c.is_multiple_of(self.ce_reduction)
            {
                return Err(Error::config(format!(
                    "stage {p} width {c} incompatible with reduction ratio {}",
                    self.ce_reduction
                )));
            }
        }
        Ok(())
    }
}

/// Named shapes collected along a traced forward pass, in network order.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// The assembled model: parameter handles plus the forward recipe. Built
/// once from an [`ArchConfig`]; all weights live in the caller's store.
pub struct Network {
    pub arch: ArchConfig,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    ces: Vec<Option<Ce>>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Network {
    pub fn build<T: Elem>(
        arch: &ArchConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        arch.validate()?;
        let (stem_k, stem_spec) = match arch.stem {
            Stem::SmallInput => (3, ConvSpec::new(1, 1, 1)),
            Stem::LargeInput => (7, ConvSpec::new(2, 3, 1)),
        };
        let stem = ConvBn::new(
            store,
            rng,
            "stem",
            arch.input_channels,
            arch.widths[0],
            stem_k,
            stem_k,
            stem_spec,
        );

        let mut next_stream = MASK_STREAM_BASE;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(arch.block_counts[s]);
            for b in 0..arch.block_counts[s] {
                let downsample = s > 0 && b == 0;
                let cin = if downsample {
                    arch.widths[s - 1]
                } else {
                    arch.widths[s]
                };
                blocks.push(Block::new(
                    store,
                    rng,
                    &format!("stage{}.block{b}", s + 1),
                    cin,
                    arch.widths[s],
                    downsample,
                    arch.main,
                    arch.alpha_init,
                    arch.alpha_learnable,
                    &mut next_stream,
                )?);
            }
            stages.push(blocks);
        }

        let mut ces = Vec::with_capacity(4);
        for s in 1..=4 {
            if arch.ce_placements.contains(&s) {
                ces.push(Some(Ce::new(
                    store,
                    rng,
                    &format!("ce{s}"),
                    arch.widths[s - 1],
                    arch.ce_reduction,
                )?));
            } else {
                ces.push(None);
            }
        }

        let c_last = arch.widths[3];
        let head_w = store.add(
            "head.weight",
            ParamKind::Weight,
            Tensor::he_normal(&[c_last, arch.classes], c_last, rng),
        );
        let head_b = store.add("head.bias", ParamKind::Bias, Tensor::zeros(&[arch.classes]));

        Ok(Network {
            arch: arch.clone(),
            stem,
            stages,
            ces,
            head_w,
            head_b,
        })
    }

    /// Runs the net and records the shape after the stem, each stage and
    /// the head — the trace `inspect` prints and the shape tests pin.
    pub fn forward_traced<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        seed: u64,
        step: u64,
    ) -> Result<(Var, ShapeTrace)> {
        let mut trace = Vec::new();
        let mut y = self.stem.forward(tape, store, x, mode)?;
        y = tape.relu(y);
        if self.arch.stem == Stem::LargeInput {
            y = tape.max_pool(y, 3, 2, 1);
        }
        trace.push(("stem".to_string(), tape.shape(y).to_vec()));
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                y = block.forward(tape, store, y, &self.arch.mask, mode, seed, step)?;
            }
            if let Some(ce) = &self.ces[s] {
                y = ce.forward(tape, store, y);
            }
            trace.push((format!("stage{}", s + 1), tape.shape(y).to_vec()));
        }
        let g = tape.global_avg_pool(y);
        let gsh = tape.shape(g).to_vec();
        let flat = tape.reshape(g, &[gsh[0], gsh[1]]);
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let logits = tape.linear(flat, w, b);
        trace.push(("logits".to_string(), tape.shape(logits).to_vec()));
        Ok((logits, trace))
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        seed: u64,
        step: u64,
    ) -> Result<Var> {
        self.forward_traced(tape, store, x, mode, seed, step)
            .map(|(v, _)| v)
    }

    /// Current fusion-gain values, one per block that has the four-branch
    /// main path, keyed by block name.
    pub fn alpha_values<T: Elem>(&self, store: &ParamStore<T>) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for blocks in &self.stages {
            for block in blocks {
                if let MainPath::Mrdc(m) = &block.main {
                    out.push((m.name.clone(), store.value(m.alpha).data()[0].as_f64()));
                }
            }
        }
        out
    }

    /// Overwrites every fusion gain with `value` (used by the frozen-gain
    /// sweep, where alpha is fixed rather than learned).
    pub fn set_alphas<T: Elem>(&self, store: &mut ParamStore<T>, value: f64) {
        for blocks in &self.stages {
            for block in blocks {
                if let MainPath::Mrdc(m) = &block.main {
                    store.get_mut(m.alpha).value.data_mut()[0] = T::from_f64(value);
                }
            }
        }
    }

    /// Stages (1-based) that carry a context gate.
    pub fn ce_stages(&self) -> Vec<usize> {
        self.ces
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|_| i + 1))
            .collect()
    }
}

/// Learnable scalar counts grouped by the top-level name component
/// (`stem`, `stage1`..`stage4`, `ce4`, `head`), in first-seen order.
pub fn param_group_counts<T: Elem>(store: &ParamStore<T>) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (_, p) in store.iter() {
        if !p.kind.is_learnable() {
            continue;
        }
        let group = p.name.split('.').next().unwrap_or(&p.name).to_string();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += p.value.numel(),
            None => groups.push((group, p.value.numel())),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskStrategy;
    use crate::nn::{conv, pool, resize};

    const EPS_COMPLEMENT: f64 = 1.0 - BN_EPS; // running var that makes eval BN exact identity

    fn null_mask() -> MaskConfig {
        MaskConfig::new(MaskStrategy::Null, 0.9, MASK_STREAM_BASE).unwrap()
    }

    /// Running stats / affine that make eval-mode BN the exact identity.
    fn bypass_bn<T: Elem>(store: &mut ParamStore<T>, prefix: &str) {
        let set = |store: &mut ParamStore<T>, name: String, v: f64| {
            let id = store
                .lookup(&name)
                .unwrap_or_else(|| panic!("missing {name}"));
            for x in store.get_mut(id).value.data_mut() {
                *x = T::from_f64(v);
            }
        };
        set(store, format!("{prefix}.bn.gamma"), 1.0);
        set(store, format!("{prefix}.bn.beta"), 0.0);
        set(store, format!("{prefix}.bn.running_mean"), 0.0);
        set(store, format!("{prefix}.bn.running_var"), EPS_COMPLEMENT);
    }

    fn zero_param<T: Elem>(store: &mut ParamStore<T>, name: &str) {
        let id = store
            .lookup(name)
            .unwrap_or_else(|| panic!("missing {name}"));
        for x in store.get_mut(id).value.data_mut() {
            *x = T::zero();
        }
    }

    /// Identity kernel: out-channel o copies in-channel o at the center tap.
    fn identity_kernel<T: Elem>(c: usize, k: usize) -> Tensor<T> {
        let mut w = Tensor::zeros(&[c, c, k, k]);
        for o in 0..c {
            let center = (k / 2) * k + k / 2;
            w.data_mut()[((o * c) + o) * k * k + center] = T::one();
        }
        w
    }

    // ── global-context branch ──────────────────────────────────

    #[test]
    fn context_branch_passes_relu_of_channel_constants() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(1);
        let fgfe = Fgfe::new(&mut store, &mut rng, "g", 4);
        store.get_mut(fgfe.conv.w).value = identity_kernel(4, 1);
        bypass_bn(&mut store, "g");

        let consts = [-1.0f32, 0.5, 2.0, 3.0];
        let mut data = Vec::new();
        for _ in 0..2 {
            for &c in &consts {
                data.extend(std::iter::repeat_n(c, 36));
            }
        }
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 4, 6, 6], data));
        let y = fgfe.forward(&mut tape, &mut store, x, Mode::Eval).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 6, 6]);
        for n in 0..2 {
            for (c, &v) in consts.iter().enumerate() {
                let want = v.max(0.0);
                let plane = &tape.value(y).data()[(n * 4 + c) * 36..(n * 4 + c + 1) * 36];
                assert!(
                    plane.iter().all(|&p| (p - want).abs() < 1e-6),
                    "channel {c}: {plane:?}"
                );
            }
        }
    }

    #[test]
    fn context_branch_output_is_spatially_constant() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(2);
        let fgfe = Fgfe::new(&mut store, &mut rng, "g", 8);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::uniform(&[3, 8, 5, 7], -2.0, 2.0, &mut rng));
        let y = fgfe.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        for plane in tape.value(y).data().chunks_exact(35) {
            assert!(
                plane.iter().all(|&v| v == plane[0]),
                "plane not constant: {plane:?}"
            );
        }
    }

    #[test]
    fn context_branch_matches_composition_oracle() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(3);
        let fgfe = Fgfe::new(&mut store, &mut rng, "g", 4);
        // desynchronize the running stats from their init so eval BN is nontrivial
        for (name, v) in [
            ("g.bn.gamma", 1.3),
            ("g.bn.beta", -0.2),
            ("g.bn.running_mean", 0.4),
            ("g.bn.running_var", 2.5),
        ] {
            let id = store.lookup(name).unwrap();
            for x in store.get_mut(id).value.data_mut() {
                *x = v;
            }
        }
        let x = Tensor::uniform(&[2, 4, 5, 7], -1.0, 1.0, &mut rng);
        let mut tape: Tape<f32> = Tape::new();
        let xv = tape.constant(x.clone());
        let y = fgfe.forward(&mut tape, &mut store, xv, Mode::Eval).unwrap();

        // hand-composed: GAP -> 1x1 conv -> affine BN -> relu -> resize
        let g = pool::global_avg_pool(&x);
        let c = conv::conv2d_im2col(&g, store.value(fgfe.conv.w), ConvSpec::new(1, 0, 1));
        let (scale, shift) =
            norm::bn_eval_affine(&[1.3f32; 4], &[-0.2; 4], &[0.4; 4], &[2.5; 4], BN_EPS);
        let mut b = c.clone();
        for n in 0..2 {
            for ch in 0..4 {
                let v = b.data_mut().get_mut(n * 4 + ch).unwrap();
                *v = (*v * scale[ch] + shift[ch]).max(0.0);
            }
        }
        let up = resize::bilinear_resize(&b, 5, 7);
        for (got, want) in tape.value(y).data().iter().zip(up.data()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    // ── channel splitting ──────────────────────────────────────

    #[test]
    fn channel_quarters_slice_and_recombine() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::from_vec(
            &[1, 4, 1, 1],
            vec![10.0, 20.0, 30.0, 40.0],
        ));
        let parts: Vec<Var> = (0..4).map(|i| tape.slice_channels(x, i, 1)).collect();
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(tape.value(*p).data(), &[(i as f32 + 1.0) * 10.0]);
        }
        let cat = tape.concat_channels(&parts);
        assert_eq!(tape.value(cat).data(), tape.value(x).data());

        let mut rng = Rng::new(4);
        let big = Tensor::uniform(&[2, 64, 3, 3], -1.0, 1.0, &mut rng);
        let bigv = tape.constant(big.clone());
        for i in 0..4 {
            let quarter = tape.slice_channels(bigv, i * 16, 16);
            for n in 0..2 {
                let got = &tape.value(quarter).data()[n * 16 * 9..(n + 1) * 16 * 9];
                let want = &big.data()[(n * 64 + i * 16) * 9..(n * 64 + i * 16 + 16) * 9];
                assert_eq!(got, want, "quarter {i} sample {n}");
            }
        }
    }

    // ── four-branch module ─────────────────────────────────────

    fn mrdc_fixture(c: usize, seed: u64) -> (ParamStore<f32>, Mrdc) {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(seed);
        let m = Mrdc::new(
            &mut store,
            &mut rng,
            "m",
            c,
            0.5,
            true,
            (MASK_STREAM_BASE, MASK_STREAM_BASE + 1),
        )
        .unwrap();
        (store, m)
    }

    #[test]
    fn zero_gain_makes_module_exact_identity() {
        let (mut store, m) = mrdc_fixture(8, 11);
        store.get_mut(m.alpha).value.data_mut()[0] = 0.0;
        let mut rng = Rng::new(12);
        for step in 0..5 {
            let mut tape: Tape<f32> = Tape::new();
            let x = Tensor::uniform(&[2, 8, 6, 6], -3.0, 3.0, &mut rng);
            let xv = tape.constant(x.clone());
            let cfg = MaskConfig::default();
            let y = m
                .forward(&mut tape, &mut store, xv, &cfg, Mode::Train, 99, step)
                .unwrap();
            assert_eq!(tape.value(y).data(), x.data(), "step {step}");
        }
    }

    #[test]
    fn zero_weights_and_bypassed_bn_make_module_identity() {
        let (mut store, m) = mrdc_fixture(8, 13);
        for name in [
            "m.b1.weight",
            "m.b2.dilated.weight",
            "m.b2.refine.weight",
            "m.b3.dilated.weight",
            "m.b3.row.weight",
            "m.b3.col.weight",
            "m.b4.weight",
            "m.fuse.weight",
        ] {
            zero_param(&mut store, name);
        }
        bypass_bn(&mut store, "m.b4");
        bypass_bn(&mut store, "m.fuse");
        store.get_mut(m.alpha).value.data_mut()[0] = 0.7;

        let mut rng = Rng::new(14);
        let mut tape: Tape<f32> = Tape::new();
        let x = Tensor::uniform(&[1, 8, 7, 7], -2.0, 2.0, &mut rng);
        let xv = tape.constant(x.clone());
        let y = m
            .forward(
                &mut tape,
                &mut store,
                xv,
                &MaskConfig::default(),
                Mode::Eval,
                0,
                0,
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn module_matches_branchwise_oracle_without_masking() {
        let q = 2;
        let (mut store, m) = mrdc_fixture(4 * q, 15);
        let mut rng = Rng::new(16);
        let x = Tensor::uniform(&[2, 4 * q, 8, 8], -1.0, 1.0, &mut rng);

        let mut tape: Tape<f32> = Tape::new();
        let xv = tape.constant(x.clone());
        let y = m
            .forward(&mut tape, &mut store, xv, &null_mask(), Mode::Train, 0, 0)
            .unwrap();

        // Branch-by-branch recomputation with the raw kernels.
        let slice_q = |i: usize| {
            let mut part = Tensor::zeros(&[2, q, 8, 8]);
            for n in 0..2 {
                let src = &x.data()[(n * 4 * q + i * q) * 64..(n * 4 * q + (i + 1) * q) * 64];
                part.data_mut()[n * q * 64..(n + 1) * q * 64].copy_from_slice(src);
            }
            part
        };
        let cv = |x: &Tensor<f32>, wname: &str, spec: ConvSpec| {
            conv::conv2d_im2col(x, store.value(store.lookup(wname).unwrap()), spec)
        };
        let b1 = cv(&slice_q(0), "m.b1.weight", ConvSpec::new(1, 1, 1));
        let b2 = cv(
            &cv(&slice_q(1), "m.b2.dilated.weight", ConvSpec::new(1, 2, 2)),
            "m.b2.refine.weight",
            ConvSpec::new(1, 1, 1),
        );
        let b3 = cv(
            &cv(
                &cv(&slice_q(2), "m.b3.dilated.weight", ConvSpec::new(1, 3, 3)),
                "m.b3.row.weight",
                ConvSpec::with_pads(1, 0, 2, 1),
            ),
            "m.b3.col.weight",
            ConvSpec::with_pads(1, 2, 0, 1),
        );
        let g = pool::global_avg_pool(&slice_q(3));
        let gc = cv(&g, "m.b4.weight", ConvSpec::new(1, 0, 1));
        let gb = norm::bn_train_forward(&gc, &[1.0f32; 2], &[0.0; 2], BN_EPS)
            .unwrap()
            .y;
        let gr = gb.map(|v| v.max(0.0));
        let b4 = resize::bilinear_resize(&gr, 8, 8);

        let mut cat = Tensor::zeros(&[2, 4 * q, 8, 8]);
        for n in 0..2 {
            for (i, b) in [&b1, &b2, &b3, &b4].iter().enumerate() {
                let dst =
                    &mut cat.data_mut()[(n * 4 * q + i * q) * 64..(n * 4 * q + (i + 1) * q) * 64];
                dst.copy_from_slice(&b.data()[n * q * 64..(n + 1) * q * 64]);
            }
        }
        let fused = cv(&cat, "m.fuse.weight", ConvSpec::new(1, 0, 1));
        let fb = norm::bn_train_forward(&fused, &[1.0f32; 8], &[0.0; 8], BN_EPS)
            .unwrap()
            .y;
        let alpha = store.value(m.alpha).data()[0];
        for (i, (got, (&f, &xi))) in tape
            .value(y)
            .data()
            .iter()
            .zip(fb.data().iter().zip(x.data()))
            .enumerate()
        {
            let want = alpha * f + xi;
            assert!((got - want).abs() < 1e-5, "index {i}: {got} vs {want}");
        }
    }

    #[test]
    fn module_rejects_widths_not_divisible_by_four() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(17);
        let e = Mrdc::new(&mut store, &mut rng, "m", 6, 0.5, true, (16, 17));
        assert!(matches!(e, Err(Error::Config(_))));
    }

    // ── context gate ───────────────────────────────────────────

    fn ce_fixture(c: usize, r: usize, seed: u64) -> (ParamStore<f32>, Ce) {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(seed);
        let ce = Ce::new(&mut store, &mut rng, "ce", c, r).unwrap();
        (store, ce)
    }

    #[test]
    fn gate_on_constant_input_has_uniform_attention() {
        let (mut store, ce) = ce_fixture(16, 4, 21);
        let _ = &mut store;
        let mut data = Vec::new();
        for n in 0..2 {
            for c in 0..16 {
                data.extend(std::iter::repeat_n((n * 16 + c) as f32 * 0.1 - 0.8, 16));
            }
        }
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 16, 4, 4], data.clone()));
        let t = ce.forward_traced(&mut tape, &store, x);
        for v in tape.value(t.saliency).data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-6, "saliency {v}");
        }
        // the weighted sum of a constant channel is that constant
        for (i, v) in tape.value(t.summary).data().iter().enumerate() {
            let want = data[i * 16];
            assert!((v - want).abs() < 1e-6, "summary[{i}] {v} vs {want}");
        }
    }

    #[test]
    fn gate_with_zero_bottleneck_halves_features() {
        let (mut store, ce) = ce_fixture(8, 4, 22);
        zero_param(&mut store, "ce.down.weight");
        zero_param(&mut store, "ce.up.weight");
        let mut rng = Rng::new(23);
        let mut tape: Tape<f32> = Tape::new();
        let x = Tensor::uniform(&[2, 8, 3, 3], -2.0, 2.0, &mut rng);
        let xv = tape.constant(x.clone());
        let y = ce.forward(&mut tape, &store, xv);
        for (got, &want) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - 0.5 * want).abs() < 1e-7);
        }
    }

    #[test]
    fn gate_attention_normalized_and_bounded() {
        let (store, ce) = ce_fixture(16, 16, 24);
        let mut rng = Rng::new(25);
        let mut tape: Tape<f32> = Tape::new();
        // activation-scale inputs: big enough to spread the attention map,
        // small enough that the sigmoid cannot saturate to exactly 1.0f32
        let x = Tensor::uniform(&[3, 16, 5, 5], -1.0, 1.0, &mut rng);
        let xv = tape.constant(x.clone());
        let t = ce.forward_traced(&mut tape, &store, xv);
        for sal in tape.value(t.saliency).data().chunks_exact(25) {
            let s: f32 = sal.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "saliency sums to {s}");
        }
        for &g in tape.value(t.gate).data() {
            assert!(g > 0.0 && g < 1.0, "gate {g} not strictly inside (0,1)");
        }
        for (got, &want) in tape.value(t.out).data().iter().zip(x.data()) {
            assert!(got.abs() <= want.abs(), "|{got}| > |{want}|");
        }
    }

    #[test]
    fn gate_summary_matches_weighted_sum_oracle() {
        let (store, ce) = ce_fixture(8, 2, 26);
        let mut rng = Rng::new(27);
        let mut tape: Tape<f32> = Tape::new();
        let x = Tensor::uniform(&[2, 8, 4, 6], -1.0, 1.0, &mut rng);
        let xv = tape.constant(x.clone());
        let t = ce.forward_traced(&mut tape, &store, xv);
        let sal = tape.value(t.saliency).data();
        let summary = tape.value(t.summary).data();
        for n in 0..2 {
            for c in 0..8 {
                let mut want = 0.0f32;
                for p in 0..24 {
                    want += x.data()[(n * 8 + c) * 24 + p] * sal[n * 24 + p];
                }
                let got = summary[n * 8 + c];
                assert!((got - want).abs() < 1e-6, "({n},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn gate_rejects_incompatible_reduction() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(28);
        assert!(matches!(
            Ce::new(&mut store, &mut rng, "a", 8, 16),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Ce::new(&mut store, &mut rng, "b", 10, 4),
            Err(Error::Config(_))
        ));
    }

    // ── residual block ─────────────────────────────────────────

    #[test]
    fn block_with_identity_first_conv_and_zero_gain_adds_relu_path() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(31);
        let mut stream = MASK_STREAM_BASE;
        let block = Block::new(
            &mut store,
            &mut rng,
            "blk",
            4,
            4,
            false,
            MainKind::Mrdc,
            0.0,
            true,
            &mut stream,
        )
        .unwrap();
        store.get_mut(block.f.w).value = identity_kernel(4, 3);
        bypass_bn(&mut store, "blk.f");

        let mut tape: Tape<f32> = Tape::new();
        let x = Tensor::uniform(&[1, 4, 6, 6], -2.0, 2.0, &mut rng);
        let xv = tape.constant(x.clone());
        let y = block
            .forward(&mut tape, &mut store, xv, &null_mask(), Mode::Eval, 0, 0)
            .unwrap();
        for (got, &xi) in tape.value(y).data().iter().zip(x.data()) {
            let want = xi.max(0.0) + xi;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn downsampling_block_halves_extent_and_doubles_width() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(32);
        let mut stream = MASK_STREAM_BASE;
        let block = Block::new(
            &mut store,
            &mut rng,
            "blk",
            64,
            128,
            true,
            MainKind::Mrdc,
            0.5,
            true,
            &mut stream,
        )
        .unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 64, 32, 32], -1.0, 1.0, &mut rng));
        let y = block
            .forward(&mut tape, &mut store, x, &null_mask(), Mode::Eval, 0, 0)
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 128, 16, 16]);
    }

    #[test]
    fn block_gradient_passes_finite_difference_check() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = Rng::new(33);
        let mut stream = MASK_STREAM_BASE;
        let block = Block::new(
            &mut store,
            &mut rng,
            "blk",
            4,
            4,
            false,
            MainKind::Mrdc,
            0.5,
            true,
            &mut stream,
        )
        .unwrap();
        let x = Tensor::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);

        let run = |store: &mut ParamStore<f64>| -> (f64, Vec<(ParamId, Vec<f64>)>) {
            let mut tape: Tape<f64> = Tape::new();
            let xv = tape.constant(x.clone());
            let y = block
                .forward(&mut tape, store, xv, &null_mask(), Mode::Train, 7, 0)
                .unwrap();
            let sq = tape.mul(y, y);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            store.zero_grad();
            tape.export_grads(&grads, store);
            let gs = store
                .ids()
                .filter(|&id| store.get(id).kind.is_learnable())
                .map(|id| (id, store.get(id).grad.data().to_vec()))
                .collect();
            (tape.value(loss).data()[0], gs)
        };
        let (_, grads) = run(&mut store);

        let mut checked = 0;
        for (id, g) in &grads {
            let len = store.value(*id).numel();
            for &i in &[0usize, len / 2, len - 1] {
                let eps = 1e-4;
                let orig = store.value(*id).data()[i];
                store.get_mut(*id).value.data_mut()[i] = orig + eps;
                let (lp, _) = run(&mut store);
                store.get_mut(*id).value.data_mut()[i] = orig - eps;
                let (lm, _) = run(&mut store);
                store.get_mut(*id).value.data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let ad = g[i];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
                assert!(
                    rel < 1e-3,
                    "{} coord {i}: fd {fd} vs ad {ad} (rel {rel})",
                    store.get(*id).name
                );
                checked += 1;
                if len == 1 {
                    break;
                }
            }
        }
        assert!(checked >= 20, "only {checked} coordinates checked");
    }

    // ── network assembly ───────────────────────────────────────

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            block_counts: vec![1, 1, 1, 1],
            widths: vec![8, 8, 8, 8],
            classes: 2,
            ce_placements: vec![4],
            ce_reduction: 4,
            mask: MaskConfig::new(MaskStrategy::Null, 0.9, MASK_STREAM_BASE).unwrap(),
            ..ArchConfig::default()
        }
    }

    #[test]
    fn default_network_shape_trace() {
        let arch = ArchConfig::default();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(41);
        let net = Network::build(&arch, &mut store, &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let (logits, trace) = net
            .forward_traced(&mut tape, &mut store, x, Mode::Eval, 0, 0)
            .unwrap();
        assert_eq!(tape.shape(logits), &[1, 10]);
        let find = |name: &str| trace.iter().find(|(n, _)| n == name).unwrap().1.clone();
        assert_eq!(find("stage1"), vec![1, 64, 32, 32]);
        assert_eq!(find("stage2"), vec![1, 128, 16, 16]);
        assert_eq!(find("stage3"), vec![1, 256, 8, 8]);
        assert_eq!(find("stage4"), vec![1, 512, 4, 4]);
    }

    #[test]
    fn large_stem_quarters_resolution() {
        let arch = ArchConfig {
            stem: Stem::LargeInput,
            block_counts: vec![1, 1, 1, 1],
            ..ArchConfig::default()
        };
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(42);
        let net = Network::build(&arch, &mut store, &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 224, 224]));
        let (_, trace) = net
            .forward_traced(&mut tape, &mut store, x, Mode::Eval, 0, 0)
            .unwrap();
        assert_eq!(trace[0], ("stem".to_string(), vec![1, 64, 56, 56]));
    }

    #[test]
    fn large_stem_still_runs_on_small_images() {
        let arch = ArchConfig {
            stem: Stem::LargeInput,
            ..tiny_arch()
        };
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(43);
        let net = Network::build(&arch, &mut store, &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng));
        let (logits, trace) = net
            .forward_traced(&mut tape, &mut store, x, Mode::Eval, 0, 0)
            .unwrap();
        assert_eq!(tape.shape(logits), &[2, 2]);
        // 32 -> 16 (stem conv) -> 8 (maxpool) -> stages halve to 1x1
        assert_eq!(
            trace.iter().find(|(n, _)| n == "stage4").unwrap().1,
            vec![2, 8, 1, 1]
        );
        assert!(tape.value(logits).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ablation_variants_build_and_differ_in_size() {
        let mut rng = Rng::new(44);
        let count = |arch: &ArchConfig, rng: &mut Rng| {
            let mut store: ParamStore<f32> = ParamStore::new();
            Network::build(arch, &mut store, rng).unwrap();
            store.scalar_count()
        };
        let base = count(&ArchConfig::default(), &mut rng);
        let no_gate = count(
            &ArchConfig {
                ce_placements: vec![],
                ..ArchConfig::default()
            },
            &mut rng,
        );
        let plain_main = count(
            &ArchConfig {
                main: MainKind::Plain,
                ..ArchConfig::default()
            },
            &mut rng,
        );
        let bare = count(
            &ArchConfig {
                main: MainKind::Plain,
                ce_placements: vec![],
                ..ArchConfig::default()
            },
            &mut rng,
        );
        assert!(no_gate < base, "removing the gate must shed parameters");
        // A full-width 3x3 conv (9c^2) outweighs the four quarter-width
        // branches (63c^2/16), so the plain-main ablation is the larger net.
        assert!(plain_main > base);
        assert!(bare < plain_main);
    }

    #[test]
    fn gate_placements_all_build() {
        for placements in [
            vec![],
            vec![1],
            vec![2],
            vec![3],
            vec![4],
            vec![1, 4],
            vec![2, 3],
            vec![1, 2, 3, 4],
        ] {
            let arch = ArchConfig {
                block_counts: vec![1, 1, 1, 1],
                widths: vec![16, 16, 16, 16],
                ce_placements: placements.clone(),
                ce_reduction: 16,
                ..ArchConfig::default()
            };
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut rng = Rng::new(45);
            let net = Network::build(&arch, &mut store, &mut rng).unwrap();
            assert_eq!(net.ce_stages(), placements, "placements {placements:?}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let bad = [
            ArchConfig {
                block_counts: vec![2, 2, 2],
                ..ArchConfig::default()
            },
            ArchConfig {
                widths: vec![64, 128, 256],
                ..ArchConfig::default()
            },
            ArchConfig {
                widths: vec![64, 128, 256, 510],
                ..ArchConfig::default()
            },
            ArchConfig {
                block_counts: vec![0, 1, 1, 1],
                ..ArchConfig::default()
            },
            ArchConfig {
                classes: 1,
                ..ArchConfig::default()
            },
            ArchConfig {
                ce_placements: vec![5],
                ..ArchConfig::default()
            },
            ArchConfig {
                ce_placements: vec![4, 4],
                ..ArchConfig::default()
            },
            ArchConfig {
                widths: vec![8, 8, 8, 8],
                ce_placements: vec![4],
                ce_reduction: 16,
                ..ArchConfig::default()
            },
            ArchConfig {
                mask: MaskConfig {
                    tau: 1.5,
                    ..MaskConfig::default()
                },
                ..ArchConfig::default()
            },
        ];
        for arch in bad {
            assert!(
                matches!(arch.validate(), Err(Error::Config(_))),
                "accepted: {arch:?}"
            );
        }
        assert!(ArchConfig::default().validate().is_ok());
    }

    #[test]
    fn whole_network_gradient_passes_finite_difference_check() {
        let arch = tiny_arch();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = Rng::new(46);
        let net = Network::build(&arch, &mut store, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);

        let run =
            |store: &mut ParamStore<f64>, want_grads: bool| -> (f64, Vec<(ParamId, Vec<f64>)>) {
                let mut tape: Tape<f64> = Tape::new();
                let xv = tape.constant(x.clone());
                let logits = net
                    .forward(&mut tape, store, xv, Mode::Train, 3, 0)
                    .unwrap();
                let sq = tape.mul(logits, logits);
                let loss = tape.mean_all(sq);
                let loss_v = tape.value(loss).data()[0];
                if !want_grads {
                    return (loss_v, Vec::new());
                }
                let grads = tape.backward(loss);
                store.zero_grad();
                tape.export_grads(&grads, store);
                let gs = store
                    .ids()
                    .filter(|&id| store.get(id).kind.is_learnable())
                    .map(|id| (id, store.get(id).grad.data().to_vec()))
                    .collect();
                (loss_v, gs)
            };
        let (_, grads) = run(&mut store, true);

        // One representative coordinate per parameter tensor still crosses
        // every module: branches, gate, stem, head, gains, BN affines.
        let mut checked = 0;
        for (id, g) in &grads {
            let i = store.value(*id).numel() / 2;
            let eps = 1e-4;
            let orig = store.value(*id).data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + eps;
            let (lp, _) = run(&mut store, false);
            store.get_mut(*id).value.data_mut()[i] = orig - eps;
            let (lm, _) = run(&mut store, false);
            store.get_mut(*id).value.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let ad = g[i];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "{} coord {i}: fd {fd} vs ad {ad} (rel {rel})",
                store.get(*id).name
            );
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} parameters checked");
    }

    #[test]
    fn param_groups_cover_all_learnables() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(47);
        let net = Network::build(&tiny_arch(), &mut store, &mut rng).unwrap();
        let groups = param_group_counts(&store);
        let total: usize = groups.iter().map(|(_, n)| n).sum();
        assert_eq!(total, store.scalar_count());
        let names: Vec<&str> = groups.iter().map(|(g, _)| g.as_str()).collect();
        assert_eq!(
            names,
            ["stem", "stage1", "stage2", "stage3", "stage4", "ce4", "head"]
        );
        assert_eq!(net.alpha_values(&store).len(), 4);
        assert_eq!(net.ce_stages(), vec![4]);
    }

    #[test]
    fn frozen_gain_sweep_overwrites_every_block() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(48);
        let arch = ArchConfig {
            alpha_learnable: false,
            alpha_init: 0.25,
            ..tiny_arch()
        };
        let net = Network::build(&arch, &mut store, &mut rng).unwrap();
        assert!(net.alpha_values(&store).iter().all(|(_, a)| *a == 0.25));
        net.set_alphas(&mut store, 0.75);
        assert!(net.alpha_values(&store).iter().all(|(_, a)| *a == 0.75));
        // frozen gains are buffers from the optimizer's point of view
        for blocks in &net.stages {
            for b in blocks {
                if let MainPath::Mrdc(m) = &b.main {
                    assert!(!store.get(m.alpha).trainable);
                }
            }
        }
    }
}
