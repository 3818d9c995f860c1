//! Dataset ingestion: CIFAR-style binary parsing, a deterministic
//! synthetic shape set for desk-scale checks, and the normalizing batcher.
//!
//! Parsing is bit-exact and total: every valid-length byte stream decodes
//! to records, and every record re-serializes to the original bytes. The
//! synthetic set exists so the whole training stack can be exercised
//! without any files on disk.

use std::fs;
use std::path::Path;

use crate::tensor::{Rng, Tensor};
use crate::{streams, Error, Result};

/// One decoded sample: planar 3×H×W pixels scaled to [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub label: usize,
    pub pixels: Vec<f32>,
    pub h: usize,
    pub w: usize,
    /// Extra label byte some formats carry (coarse category); kept so
    /// re-serialization is byte-identical.
    pub coarse: Option<u8>,
}

impl LabeledImage {
    pub fn numel(&self) -> usize {
        3 * self.h * self.w
    }
}

/// What the batcher and the run manifest need to know about a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    pub train_len: usize,
    pub eval_len: usize,
    pub extent: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Per-channel mean/std over the training split; zero spreads are clamped
/// to 1 so normalization is always well-defined.
pub fn compute_meta(
    name: &str,
    classes: usize,
    train: &[LabeledImage],
    eval_len: usize,
) -> Result<DatasetMeta> {
    let first = train
        .first()
        .ok_or_else(|| Error::data("cannot compute statistics of an empty training split"))?;
    let (h, w) = (first.h, first.w);
    let plane = h * w;
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    let count = (train.len() * plane) as f64;
    for img in train {
        for (c, m) in mean.iter_mut().enumerate() {
            for &p in &img.pixels[c * plane..(c + 1) * plane] {
                *m += p as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for img in train {
        for (c, v) in var.iter_mut().enumerate() {
            for &p in &img.pixels[c * plane..(c + 1) * plane] {
                let d = p as f64 - mean[c];
                *v += d * d;
            }
        }
    }
    let mut std = [0.0f32; 3];
    for c in 0..3 {
        let s = (var[c] / count).sqrt();
        std[c] = if s > 0.0 { s as f32 } else { 1.0 };
    }
    Ok(DatasetMeta {
        name: name.to_string(),
        classes,
        train_len: train.len(),
        eval_len,
        extent: h,
        mean: [mean[0] as f32, mean[1] as f32, mean[2] as f32],
        std,
    })
}

// ── binary record formats ────────────────────────────────────────

const PLANE_32: usize = 32 * 32;
const PIXELS_32: usize = 3 * PLANE_32;

fn decode_pixels(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

fn encode_pixels(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
}

/// 3073-byte records: 1 label byte (0..10), then 1024 R + 1024 G + 1024 B.
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    const REC: usize = 1 + PIXELS_32;
    if !bytes.len().is_multiple_of(REC) {
        return Err(Error::parse(
            bytes.len() - bytes.len() % REC,
            format!(
                "truncated record: {} trailing bytes (record size {REC})",
                bytes.len() % REC
            ),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / REC);
    for (i, rec) in bytes.chunks_exact(REC).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::parse(
                i * REC,
                format!("label byte {label} out of range 0..10"),
            ));
        }
        out.push(LabeledImage {
            label,
            pixels: decode_pixels(&rec[1..]),
            h: 32,
            w: 32,
            coarse: None,
        });
    }
    Ok(out)
}

pub fn serialize_cifar10(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * (1 + PIXELS_32));
    for img in images {
        if img.label >= 10 || img.numel() != PIXELS_32 {
            return Err(Error::data(format!(
                "image (label {}, {}x{}) does not fit the 10-class 32x32 record",
                img.label, img.h, img.w
            )));
        }
        out.push(img.label as u8);
        out.extend(encode_pixels(&img.pixels));
    }
    Ok(out)
}

/// 3074-byte records: coarse label byte, fine label byte (0..100), pixels.
/// The fine label is the class; the coarse byte is retained verbatim.
pub fn parse_cifar100_bin(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    const REC: usize = 2 + PIXELS_32;
    if !bytes.len().is_multiple_of(REC) {
        return Err(Error::parse(
            bytes.len() - bytes.len() % REC,
            format!(
                "truncated record: {} trailing bytes (record size {REC})",
                bytes.len() % REC
            ),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / REC);
    for (i, rec) in bytes.chunks_exact(REC).enumerate() {
        let fine = rec[1] as usize;
        if fine >= 100 {
            return Err(Error::parse(
                i * REC + 1,
                format!("fine label byte {fine} out of range 0..100"),
            ));
        }
        out.push(LabeledImage {
            label: fine,
            pixels: decode_pixels(&rec[2..]),
            h: 32,
            w: 32,
            coarse: Some(rec[0]),
        });
    }
    Ok(out)
}

pub fn serialize_cifar100(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * (2 + PIXELS_32));
    for img in images {
        if img.label >= 100 || img.numel() != PIXELS_32 {
            return Err(Error::data(format!(
                "image (label {}, {}x{}) does not fit the 100-class 32x32 record",
                img.label, img.h, img.w
            )));
        }
        out.push(img.coarse.unwrap_or(0));
        out.push(img.label as u8);
        out.extend(encode_pixels(&img.pixels));
    }
    Ok(out)
}

/// Loads the standard five training shards + test shard from `dir`.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        train.extend(parse_cifar10_bin(&fs::read(&path)?)?);
    }
    let test = parse_cifar10_bin(&fs::read(dir.join("test_batch.bin"))?)?;
    Ok((train, test))
}

pub fn load_cifar100_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let train = parse_cifar100_bin(&fs::read(dir.join("train.bin"))?)?;
    let test = parse_cifar100_bin(&fs::read(dir.join("test.bin"))?)?;
    Ok((train, test))
}

// ── synthetic shapes ─────────────────────────────────────────────

/// Deterministic two-class set: bright axis-aligned rectangles (class 0)
/// vs bright disks (class 1) on dark noise, balanced, split 80/20 with the
/// training share rounded down. Rectangle areas are drawn strictly larger
/// than disk areas, so even the mean pixel value separates the classes —
/// any learner that cannot fit this set is broken.
pub fn synth_dataset(n: usize, extent: usize, seed: u64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    assert!(n >= 4, "need at least two samples per class");
    assert!(
        extent >= 8,
        "images smaller than 8px cannot hold the shapes"
    );
    let mut rng = Rng::stream(seed, streams::SYNTH);
    let e = extent;
    let mut all = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let plane = e * e;
        let mut pixels = vec![0.0f32; 3 * plane];
        for p in pixels.iter_mut() {
            *p = (rng.uniform() * 0.25) as f32;
        }
        let mut fill = |y0: usize,
                        y1: usize,
                        x0: usize,
                        x1: usize,
                        disk: Option<(f64, f64, f64)>,
                        rng: &mut Rng| {
            for y in y0..y1 {
                for x in x0..x1 {
                    if let Some((cy, cx, r)) = disk {
                        let dy = y as f64 + 0.5 - cy;
                        let dx = x as f64 + 0.5 - cx;
                        if dy * dy + dx * dx > r * r {
                            continue;
                        }
                    }
                    let v = (0.75 + rng.uniform() * 0.25) as f32;
                    for c in 0..3 {
                        pixels[c * plane + y * e + x] = v;
                    }
                }
            }
        };
        if class == 0 {
            // rectangle with side in [e/3, e/2]
            let span = |rng: &mut Rng| e / 3 + rng.below(e / 2 - e / 3 + 1);
            let (rh, rw) = (span(&mut rng), span(&mut rng));
            let y0 = rng.below(e - rh + 1);
            let x0 = rng.below(e - rw + 1);
            fill(y0, y0 + rh, x0, x0 + rw, None, &mut rng);
        } else {
            // disk with radius in [e/8, e/6]
            let r_lo = e as f64 / 8.0;
            let r_hi = e as f64 / 6.0;
            let r = r_lo + rng.uniform() * (r_hi - r_lo);
            let margin = r.ceil() as usize + 1;
            let cy = margin as f64 + rng.uniform() * (e - 2 * margin) as f64;
            let cx = margin as f64 + rng.uniform() * (e - 2 * margin) as f64;
            let y0 = (cy - r).floor().max(0.0) as usize;
            let y1 = ((cy + r).ceil() as usize).min(e);
            let x0 = (cx - r).floor().max(0.0) as usize;
            let x1 = ((cx + r).ceil() as usize).min(e);
            fill(y0, y1, x0, x1, Some((cy, cx, r)), &mut rng);
        }
        all.push(LabeledImage {
            label: class,
            pixels,
            h: e,
            w: e,
            coarse: None,
        });
    }
    let train_len = n * 8 / 10;
    let eval = all.split_off(train_len);
    (all, eval)
}

// ── batching ─────────────────────────────────────────────────────

/// One normalized mini-batch ready for the tape.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset indices the batch was drawn from, in batch order.
    pub indices: Vec<usize>,
}

/// Lazy batch iterator: one permutation per construction (when a shuffle
/// rng is given), every index visited exactly once, final partial batch
/// included. Images are normalized per channel with the dataset stats.
pub struct Batcher<'a> {
    set: &'a [LabeledImage],
    meta: &'a DatasetMeta,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(
        set: &'a [LabeledImage],
        meta: &'a DatasetMeta,
        batch_size: usize,
        shuffle: Option<&mut Rng>,
    ) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::data("cannot batch an empty dataset"));
        }
        assert!(batch_size >= 1);
        let mut order: Vec<usize> = (0..set.len()).collect();
        if let Some(rng) = shuffle {
            rng.shuffle(&mut order);
        }
        Ok(Batcher {
            set,
            meta,
            order,
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;

        let (h, w) = (self.set[idx[0]].h, self.set[idx[0]].w);
        let plane = h * w;
        let mut data = Vec::with_capacity(idx.len() * 3 * plane);
        for &i in idx {
            let img = &self.set[i];
            for c in 0..3 {
                let (m, s) = (self.meta.mean[c], self.meta.std[c]);
                data.extend(
                    img.pixels[c * plane..(c + 1) * plane]
                        .iter()
                        .map(|&p| (p - m) / s),
                );
            }
        }
        Some(Batch {
            images: Tensor::from_vec(&[idx.len(), 3, h, w], data),
            labels: idx.iter().map(|&i| self.set[i].label).collect(),
            indices: idx.to_vec(),
        })
    }
}
