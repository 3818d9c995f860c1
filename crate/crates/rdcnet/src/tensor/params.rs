//! Named parameter storage.
//!
//! The network structure owns no tensors; every learnable lives here under
//! a stable dotted name (`stage2.block0.fuse.weight`). The tape reads
//! values out and accumulates gradients back in, the optimizer walks the
//! store, and checkpoints are a straight dump of it.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// What a parameter is, which decides optimizer treatment: only `Weight`
/// (conv and linear kernels) receives weight decay, and `Buffer` entries
/// (batch-norm running stats) are never touched by the optimizer at all;
/// they ride along here so checkpoints capture them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    /// Per-block residual fusion gain.
    BlockGain,
    /// Non-learnable state (running mean/variance).
    Buffer,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }

    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters keep their gradient but are skipped by the
    /// optimizer (used for gain-sweep experiments).
    pub trainable: bool,
    /// True once a backward pass has written into `grad` since the last
    /// `zero_grad`; lets the optimizer tell "gradient is zero" apart from
    /// "nobody ran backward".
    pub grad_written: bool,
}

pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
            grad,
            trainable: true,
            grad_written: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across learnable parameters; buffers (running
    /// stats) are state, not parameters, and are excluded.
    pub fn scalar_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_learnable())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
            p.grad_written = false;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.numel(), grad.len());
        for (dst, &src) in p.grad.data_mut().iter_mut().zip(grad) {
            *dst += src;
        }
        p.grad_written = true;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Shadow copy at another precision, same names/kinds/flags.
    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data = p
                .value
                .data()
                .iter()
                .map(|&v| U::from_f64(v.as_f64()))
                .collect();
            let id = out.add(&p.name, p.kind, Tensor::from_vec(p.value.shape(), data));
            out.set_trainable(id, p.trainable);
        }
        out
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDCK";

impl ParamStore<f32> {
    /// Checkpoint layout, little-endian: magic "RDCK", u32 param count,
    /// manifest of (u32 name_len, name bytes, u32 rank, u32 extents)
    /// entries, then the tensor records concatenated in manifest order.
    pub fn save_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &e in p.value.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
        }
        for p in &self.params {
            p.value.write_to(w)?;
        }
        Ok(())
    }

    /// Loads a checkpoint into this store. The file must carry exactly the
    /// parameters this store declares, same names and shapes; anything
    /// missing, extra, or reshaped is an error naming the offender.
    pub fn load_checkpoint(&mut self, r: &mut impl Read) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, format!("bad checkpoint magic {magic:?}")));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        if count != self.params.len() {
            return Err(Error::data(format!(
                "checkpoint has {count} parameters, model expects {}",
                self.params.len()
            )));
        }
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf4)?;
            let name_len = u32::from_le_bytes(buf4) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::data(format!("checkpoint name not utf-8: {e}")))?;
            r.read_exact(&mut buf4)?;
            let rank = u32::from_le_bytes(buf4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut buf4)?;
                shape.push(u32::from_le_bytes(buf4) as usize);
            }
            manifest.push((name, shape));
        }
        for (name, shape) in &manifest {
            let id = self.lookup(name).ok_or_else(|| {
                Error::data(format!("checkpoint parameter {name:?} unknown to model"))
            })?;
            let want = self.value(id).shape();
            if want != &shape[..] {
                return Err(Error::data(format!(
                    "checkpoint parameter {name:?} has shape {shape:?}, model expects {want:?}"
                )));
            }
        }
        for (name, _) in &manifest {
            let t = Tensor::<f32>::read_from(r)?;
            let id = self.lookup(name).expect("validated above");
            self.params[id.0].value = t;
        }
        Ok(())
    }
}
