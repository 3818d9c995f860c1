//! Training: SGD with momentum and decoupled-by-kind weight decay,
//! label-smoothed cross entropy, cosine learning-rate annealing, the
//! flip/crop/erase augmentation pipeline, and the epoch loop that ties
//! them to the batcher and the tape.
//!
//! Everything stochastic draws from addressed RNG cells
//! (`Rng::for_step(seed, stream, epoch or step)`), so a run is a pure
//! function of its config: same seed, same loss trajectory, bit for bit.

use std::fmt;
use std::ops::ControlFlow;

use crate::blocks::Network;
use crate::data::{Batcher, DatasetMeta, LabeledImage};
use crate::tensor::{Elem, ParamStore, Rng, Tape, Tensor, Var};
use crate::{streams, Error, Mode, Result};

/// Probability of mirroring an image left-right.
pub const FLIP_PROB: f64 = 0.5;
/// Zero-padding margin before the random crop.
pub const CROP_PAD: usize = 4;
/// Probability of erasing a random patch.
pub const ERASE_PROB: f64 = 0.5;
/// Erased patch area as a fraction of the image, sampled uniformly.
pub const ERASE_AREA: (f64, f64) = (0.02, 0.33);
/// Erased patch height/width ratio, sampled uniformly.
pub const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);

/// Optimization hyperparameters. Defaults are the full recipe: 200 epochs
/// of batch-128 SGD from lr 0.1 annealed to 0, momentum 0.9, weight decay
/// 5e-4 on conv/linear kernels, smoothing 0.1, all augmentations on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hflip: bool,
    pub pad_crop: bool,
    pub random_erase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            epochs: 200,
            batch_size: 128,
            seed: 0,
            hflip: true,
            pad_crop: true,
            random_erase: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "train.lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min.is_finite()) {
            return Err(Error::config(format!(
                "train.lr_min must be non-negative, got {}",
                self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "train.momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "train.label_smoothing must lie in [0,1), got {}",
                self.label_smoothing
            )));
        }
        if self.epochs < 1 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Cosine annealing, stepped per epoch:
/// `lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / epochs)) / 2`.
/// Exact at the rails: lr(0) = lr0, lr(epochs) = lr_min.
pub fn cosine_lr(t: usize, epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if t > epochs {
        return Err(Error::contract(format!(
            "schedule evaluated at epoch {t} past its horizon {epochs}"
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / epochs as f64;
    Ok(lr_min + (lr0 - lr_min) * 0.5 * (1.0 + phase.cos()))
}

/// Mean over the batch of the smoothed cross entropy
/// `-sum_k q_k log softmax(z)_k` with `q = (1-s)*onehot + s/K`.
pub fn label_smoothed_ce<T: Elem>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let mut q = vec![T::from_f64(smoothing / k as f64); n * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::data(format!(
                "label {label} at index {i} out of range for {k} classes"
            )));
        }
        q[i * k + label] += T::from_f64(1.0 - smoothing);
    }
    let q = tape.constant(Tensor::from_vec(&[n, k], q));
    let lsm = tape.log_softmax_rows(logits);
    let weighted = tape.mul(q, lsm);
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Top-1 accuracy; ties resolve to the lowest class index.
pub fn accuracy<T: Elem>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// SGD with momentum. Per step and parameter:
/// `g' = grad + weight_decay * value` (decay on kernel weights only),
/// `v <- momentum * v + g'`, `value <- value - lr * v`.
/// Buffers and frozen parameters are skipped.
pub struct Sgd<T = f32> {
    vel: Vec<Tensor<T>>,
}

impl<T: Elem> Sgd<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let vel = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Sgd { vel }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        assert_eq!(
            self.vel.len(),
            store.len(),
            "optimizer built for a different store"
        );
        let lr_t = T::from_f64(lr);
        let mu = T::from_f64(momentum);
        let wd = T::from_f64(weight_decay);
        for (idx, id) in store.ids().enumerate() {
            let p = store.get_mut(id);
            if !p.kind.is_learnable() || !p.trainable {
                continue;
            }
            if !p.grad_written {
                return Err(Error::contract(format!(
                    "parameter {} has no gradient; run backward and export before stepping",
                    p.name
                )));
            }
            let decays = p.kind.decays();
            let v = self.vel[idx].data_mut();
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let mut g = grad[i];
                if decays {
                    g += wd * value[i];
                }
                v[i] = mu * v[i] + g;
                value[i] -= lr_t * v[i];
            }
        }
        Ok(())
    }
}

// ── augmentation ─────────────────────────────────────────────────

/// Mirrors each channel plane left-right.
pub fn flip_horizontal<T: Elem>(pixels: &mut [T], h: usize, w: usize) {
    debug_assert_eq!(pixels.len() % (h * w), 0);
    for plane in pixels.chunks_exact_mut(h * w) {
        for row in plane.chunks_exact_mut(w) {
            row.reverse();
        }
    }
}

/// Zero-pads by `pad` on every side, then crops the original extent back
/// out at offset (oy, ox) into the padded canvas; (pad, pad) is identity.
pub fn pad_crop<T: Elem>(pixels: &mut [T], h: usize, w: usize, pad: usize, oy: usize, ox: usize) {
    debug_assert!(oy <= 2 * pad && ox <= 2 * pad);
    let c = pixels.len() / (h * w);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = ch * h * w + y * w;
            let dst = ch * ph * pw + (y + pad) * pw + pad;
            padded[dst..dst + w].copy_from_slice(&pixels[src..src + w]);
        }
    }
    for ch in 0..c {
        for y in 0..h {
            let src = ch * ph * pw + (y + oy) * pw + ox;
            let dst = ch * h * w + y * w;
            pixels[dst..dst + w].copy_from_slice(&padded[src..src + w]);
        }
    }
}

/// Overwrites the patch with per-pixel uniform noise in [0,1).
#[allow(clippy::too_many_arguments)]
pub fn erase<T: Elem>(
    pixels: &mut [T],
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    eh: usize,
    ew: usize,
    rng: &mut Rng,
) {
    debug_assert!(y0 + eh <= h && x0 + ew <= w);
    let c = pixels.len() / (h * w);
    for ch in 0..c {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                pixels[ch * h * w + y * w + x] = T::from_f64(rng.uniform());
            }
        }
    }
}

/// The full per-image pipeline in fixed draw order: mirror with
/// probability 1/2, zero-pad-4 random crop, then random erasing with
/// probability 1/2 (patch area 2-33% of the image, aspect in [0.3, 3.3],
/// up to 10 placement attempts). Disabled stages draw nothing.
pub fn augment<T: Elem>(pixels: &mut [T], h: usize, w: usize, cfg: &TrainConfig, rng: &mut Rng) {
    if cfg.hflip && rng.uniform() < FLIP_PROB {
        flip_horizontal(pixels, h, w);
    }
    if cfg.pad_crop {
        let oy = rng.below(2 * CROP_PAD + 1);
        let ox = rng.below(2 * CROP_PAD + 1);
        pad_crop(pixels, h, w, CROP_PAD, oy, ox);
    }
    if cfg.random_erase && rng.uniform() < ERASE_PROB {
        for _ in 0..10 {
            let area =
                (ERASE_AREA.0 + rng.uniform() * (ERASE_AREA.1 - ERASE_AREA.0)) * (h * w) as f64;
            let aspect = ERASE_ASPECT.0 + rng.uniform() * (ERASE_ASPECT.1 - ERASE_ASPECT.0);
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            if eh >= 1 && ew >= 1 && eh <= h && ew <= w {
                let y0 = rng.below(h - eh + 1);
                let x0 = rng.below(w - ew + 1);
                erase(pixels, h, w, y0, x0, eh, ew, rng);
                break;
            }
        }
    }
}

// ── the epoch loop ───────────────────────────────────────────────

/// One line of the training report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Absent when no evaluation split was supplied.
    pub eval_acc: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} train_loss={} train_acc={}",
            self.epoch, self.lr, self.train_loss, self.train_acc
        )?;
        match self.eval_acc {
            Some(a) => write!(f, " eval_acc={a}"),
            None => write!(f, " eval_acc=none"),
        }
    }
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Optimizer steps taken (mask draws are addressed by this counter).
    pub steps: u64,
}

/// Runs the recipe: per epoch, reshuffle (stream 1), augment (stream 2),
/// and for each batch do forward / smoothed-CE / backward / SGD step with
/// the epoch's cosine lr. Mask draws inside the network are addressed by
/// the global step. A non-finite loss aborts with the first offending
/// tape node named.
///
/// `on_epoch` sees every completed epoch record (the caller prints it,
/// logs it, or stops the loop early by returning `Break` — the loop
/// itself never decides to stop before `cfg.epochs`).
pub fn train_loop(
    net: &Network,
    store: &mut ParamStore<f32>,
    train_set: &[LabeledImage],
    eval_set: &[LabeledImage],
    meta: &DatasetMeta,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut sgd = Sgd::new(store);
    let mut records = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)?;
        let mut shuffle_rng = Rng::for_step(cfg.seed, streams::SHUFFLE, epoch as u64);
        let mut aug_rng = Rng::for_step(cfg.seed, streams::AUGMENT, epoch as u64);
        let batcher = Batcher::new(train_set, meta, cfg.batch_size, Some(&mut shuffle_rng))?;

        let mut loss_sum = 0.0f64;
        let mut correct = 0.0f64;
        let mut seen = 0usize;
        for mut batch in batcher {
            let n = batch.labels.len();
            let (h, w) = {
                let sh = batch.images.shape();
                (sh[2], sh[3])
            };
            for img in batch.images.data_mut().chunks_exact_mut(3 * h * w) {
                augment(img, h, w, cfg, &mut aug_rng);
            }

            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let logits = net.forward(&mut tape, store, x, Mode::Train, cfg.seed, step)?;
            let loss = label_smoothed_ce(&mut tape, logits, &batch.labels, cfg.label_smoothing)?;
            let loss_val = tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                let culprit = tape
                    .first_nonfinite()
                    .map(|(node, op)| format!("node {node} ({op})"))
                    .unwrap_or_else(|| "the loss itself".to_string());
                return Err(Error::contract(format!(
                    "non-finite loss at epoch {} step {step}; first non-finite tensor: {culprit}",
                    epoch + 1
                )));
            }
            loss_sum += loss_val * n as f64;
            correct += accuracy(tape.value(logits), &batch.labels) * n as f64;
            seen += n;

            let grads = tape.backward(loss);
            store.zero_grad();
            tape.export_grads(&grads, store);
            sgd.step(store, lr, cfg.momentum, cfg.weight_decay)?;
            step += 1;
        }

        let eval_acc = if eval_set.is_empty() {
            None
        } else {
            Some(eval_metrics(net, store, eval_set, meta, cfg.batch_size, 0.0)?.0)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct / seen as f64,
            eval_acc,
        };
        records.push(record);
        if let ControlFlow::Break(()) = on_epoch(records.last().unwrap()) {
            break;
        }
    }
    Ok(TrainOutcome {
        records,
        steps: step,
    })
}

/// Inference pass over a split: (top-1 accuracy, mean loss). Touches no
/// parameter, buffer or RNG state — evaluating twice is bitwise
/// idempotent.
pub fn eval_metrics(
    net: &Network,
    store: &mut ParamStore<f32>,
    set: &[LabeledImage],
    meta: &DatasetMeta,
    batch_size: usize,
    smoothing: f64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0f64;
    let mut correct = 0.0f64;
    let mut seen = 0usize;
    for batch in Batcher::new(set, meta, batch_size, None)? {
        let n = batch.labels.len();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let logits = net.forward(&mut tape, store, x, Mode::Eval, 0, 0)?;
        let loss = label_smoothed_ce(&mut tape, logits, &batch.labels, smoothing)?;
        loss_sum += tape.value(loss).data()[0] as f64 * n as f64;
        correct += accuracy(tape.value(logits), &batch.labels) * n as f64;
        seen += n;
    }
    Ok((correct / seen as f64, loss_sum / seen as f64))
}
