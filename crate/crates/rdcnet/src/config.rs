//! Flat-key run configuration.
//!
//! A run is fully described by a plain-text file of `key = value` lines
//! (`#` starts a comment). [`RunConfig::parse`] reads one, fills every
//! unmentioned key from the defaults, and validates; [`RunConfig::render`]
//! writes the fully resolved form back out. Training emits that rendered
//! form as the run manifest, so `parse(render(c)) == c` is the contract
//! that makes any finished run re-runnable bit for bit.

use crate::blocks::{ArchConfig, MainKind, Stem};
use crate::mask::MaskStrategy;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Which dataset a run trains on. CIFAR variants read binary shards from
/// the directory given on the command line; the synthetic set is generated
/// from the seed and needs no files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(DatasetKind::Synthetic),
            "cifar10" => Some(DatasetKind::Cifar10),
            "cifar100" => Some(DatasetKind::Cifar100),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::Synthetic => 2,
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }
}

/// Everything a run needs: seed, data selection, architecture, recipe,
/// output location. The class count is not a key — it follows the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    /// Synthetic only: total sample count (split 80/20 internally).
    pub synth_size: usize,
    /// Synthetic only: image side length.
    pub synth_extent: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetKind::Synthetic,
            synth_size: 256,
            synth_extent: 32,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            out_dir: "runs/default".to_string(),
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

/// Comma-separated integers; the empty string is the empty list.
fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

fn render_list(items: &[usize]) -> String {
    items
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies `key = value` lines over the defaults, then validates.
    /// Unknown keys, malformed values and invariant violations all come
    /// back as config errors naming the offending key (and line).
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    idx + 1
                ))
            })?;
            cfg.apply(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("line {}: {msg}", idx + 1)),
                other => other,
            })?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "dataset" => {
                self.dataset = DatasetKind::parse(v).ok_or_else(|| {
                    Error::config(format!(
                        "dataset: expected synthetic, cifar10 or cifar100, got {v:?}"
                    ))
                })?;
            }
            "dataset.size" => self.synth_size = parse_usize(key, v)?,
            "dataset.extent" => self.synth_extent = parse_usize(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "arch.stem" => {
                self.arch.stem = Stem::parse(v).ok_or_else(|| {
                    Error::config(format!(
                        "arch.stem: expected small_input or large_input, got {v:?}"
                    ))
                })?;
            }
            "arch.blocks" => self.arch.block_counts = parse_list(key, v)?,
            "arch.widths" => self.arch.widths = parse_list(key, v)?,
            "arch.main" => {
                self.arch.main = MainKind::parse(v).ok_or_else(|| {
                    Error::config(format!("arch.main: expected mrdc or plain, got {v:?}"))
                })?;
            }
            "arch.alpha_init" => self.arch.alpha_init = parse_f64(key, v)?,
            "arch.alpha_learnable" => self.arch.alpha_learnable = parse_bool(key, v)?,
            "arch.ce_placements" => self.arch.ce_placements = parse_list(key, v)?,
            "arch.ce_reduction" => self.arch.ce_reduction = parse_usize(key, v)?,
            "mask.strategy" => {
                self.arch.mask.strategy = MaskStrategy::parse(v).ok_or_else(|| {
                    Error::config(format!(
                        "mask.strategy: expected null_mask, c_mask, k_mask or c_k_mask, got {v:?}"
                    ))
                })?;
            }
            "mask.tau" => self.arch.mask.tau = parse_f64(key, v)?,
            "train.lr0" => self.train.lr0 = parse_f64(key, v)?,
            "train.lr_min" => self.train.lr_min = parse_f64(key, v)?,
            "train.momentum" => self.train.momentum = parse_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(key, v)?,
            "train.label_smoothing" => self.train.label_smoothing = parse_f64(key, v)?,
            "train.epochs" => self.train.epochs = parse_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_usize(key, v)?,
            "train.hflip" => self.train.hflip = parse_bool(key, v)?,
            "train.pad_crop" => self.train.pad_crop = parse_bool(key, v)?,
            "train.random_erase" => self.train.random_erase = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Propagates derived fields and checks all invariants.
    fn finalize(&mut self) -> Result<()> {
        self.arch.classes = self.dataset.classes();
        self.train.seed = self.seed;
        if self.dataset == DatasetKind::Synthetic {
            if self.synth_size < 4 {
                return Err(Error::config(format!(
                    "dataset.size: need at least 4 samples, got {}",
                    self.synth_size
                )));
            }
            if self.synth_extent < 8 {
                return Err(Error::config(format!(
                    "dataset.extent: need at least 8 pixels, got {}",
                    self.synth_extent
                )));
            }
        }
        self.arch.validate()?;
        self.train.validate()
    }

    /// The fully resolved config, one key per line, parseable by
    /// [`RunConfig::parse`]. Float values print in shortest round-trip
    /// form, so the rendering is lossless.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.as_str().to_string());
        if self.dataset == DatasetKind::Synthetic {
            kv("dataset.size", self.synth_size.to_string());
            kv("dataset.extent", self.synth_extent.to_string());
        }
        kv("out_dir", self.out_dir.clone());
        kv("arch.stem", self.arch.stem.as_str().to_string());
        kv("arch.blocks", render_list(&self.arch.block_counts));
        kv("arch.widths", render_list(&self.arch.widths));
        kv("arch.main", self.arch.main.as_str().to_string());
        kv("arch.alpha_init", self.arch.alpha_init.to_string());
        kv(
            "arch.alpha_learnable",
            self.arch.alpha_learnable.to_string(),
        );
        kv("arch.ce_placements", render_list(&self.arch.ce_placements));
        kv("arch.ce_reduction", self.arch.ce_reduction.to_string());
        kv(
            "mask.strategy",
            self.arch.mask.strategy.as_str().to_string(),
        );
        kv("mask.tau", self.arch.mask.tau.to_string());
        kv("train.lr0", self.train.lr0.to_string());
        kv("train.lr_min", self.train.lr_min.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv(
            "train.label_smoothing",
            self.train.label_smoothing.to_string(),
        );
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.hflip", self.train.hflip.to_string());
        kv("train.pad_crop", self.train.pad_crop.to_string());
        kv("train.random_erase", self.train.random_erase.to_string());
        out
    }
}
