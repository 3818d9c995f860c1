//! Dense tensor storage plus the reverse-mode tape.
//!
//! A [`Tensor`] is a plain value: a shape and a row-major buffer of reals,
//! immutable once built and cheap to move between threads. Gradients do not
//! live on the value type; they live on [`Tape`] nodes during a recorded
//! forward/backward pass and on [`ParamStore`] entries between optimizer
//! steps.
//!
//! Training runs in `f32`. Every op is generic over [`Elem`] so the same
//! code path can be instantiated at `f64` as the shadow evaluation used by
//! the finite-difference gradient oracles.

mod params;
mod rng;
mod tape;

pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use rng::Rng;
pub use tape::{BnStats, Grads, Tape, Var};

use std::fmt::Debug;

use num_traits::{Float, NumAssignOps, NumCast};

use crate::error::{Error, Result};

/// Scalar element for tensor math: `f32` in production, `f64` for oracle
/// shadow evaluation.
pub trait Elem: Float + NumAssignOps + NumCast + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array, row-major, NCHW for 4-d feature maps.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl<T: Elem> Tensor<T> {
    /// Checks the shape contract shared by all constructors: at least one
    /// axis, every extent >= 1.
    pub fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() {
            return Err(Error::shape("tensor shape must have at least one axis"));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::check_shape(shape).expect("invalid tensor shape");
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} values, got {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform draws in `[a, b)`.
    pub fn uniform(shape: &[usize], a: f64, b: f64, rng: &mut Rng) -> Self {
        Self::check_shape(shape).expect("invalid tensor shape");
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(a + (b - a) * rng.uniform()))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// He initialization: normal(0, sqrt(2 / fan_in)).
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        Self::check_shape(shape).expect("invalid tensor shape");
        assert!(fan_in >= 1, "he_normal needs fan_in >= 1");
        let std = (2.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(std * rng.normal()))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        Self::check_shape(shape).expect("invalid tensor shape");
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.data.len(),
            "reshape {:?} -> {shape:?}",
            self.shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    /// Finiteness checkpoint; ops themselves never trap on NaN/Inf.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite value {v:?} at flat index {i} in {context}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Tensor<f32> {
    pub fn from_f64(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// Broadcast result shape under the usual right-aligned rules: missing
/// leading axes are treated as extent 1; paired extents must match or one
/// of them must be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let eb = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if ea != eb && ea != 1 && eb != 1 {
            return Err(Error::shape(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
        out[i] = ea.max(eb);
    }
    Ok(out)
}

/// Row-major strides, with zero stride on broadcast (extent-1) axes when
/// viewed against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            strides[i] = natural[i - offset];
        }
    }
    strides
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_apply<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(a.data[oa], b.data[ob]));
        // odometer increment over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Sums `grad` (shaped `grad_shape`) down to `target_shape`, undoing a
/// broadcast. Summation runs in flat row-major order.
pub fn reduce_to_shape<T: Elem>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![T::zero(); target_numel];
    let strides = broadcast_strides(target_shape, grad_shape);
    let rank = grad_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += strides[d];
            if idx[d] < grad_shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= strides[d] * grad_shape[d];
        }
    }
    out
}

/// Materializes the broadcast expansion of `t` to `out_shape` (test oracle
/// and equivalence checks).
pub fn broadcast_materialize<T: Elem>(t: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let strides = broadcast_strides(&t.shape, out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(t.data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * out_shape[d];
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

// ── Binary serialization ─────────────────────────────────────────────

pub const TENSOR_MAGIC: &[u8; 4] = b"RDCT";

impl Tensor<f32> {
    /// Little-endian record: magic "RDCT", u32 rank, u32 extents, raw f32
    /// payload. Used for checkpoints and golden files.
    pub fn write_to(&self, w: &mut impl std::io::Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl std::io::Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::parse(0, format!("bad tensor magic {magic:?}")));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::parse(4, format!("unreasonable tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        Self::check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4));
        }
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones() {
        let z: Tensor = Tensor::zeros(&[2, 3]);
        assert_eq!(z.shape(), &[2, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o: Tensor = Tensor::ones(&[1]);
        assert_eq!(o.data(), &[1.0]);
    }

    #[test]
    fn uniform_sample_mean_near_half() {
        let mut rng = Rng::new(7);
        let t: Tensor = Tensor::uniform(&[10_000], 0.0, 1.0, &mut rng);
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::check_shape(&[2, 0, 3]).is_err());
        assert!(Tensor::<f32>::check_shape(&[]).is_err());
        assert!(Tensor::<f32>::check_shape(&[4]).is_ok());
    }

    #[test]
    fn he_normal_statistics() {
        let mut rng = Rng::new(11);
        let fan_in = 128;
        let t: Tensor = Tensor::he_normal(&[20_000], fan_in, &mut rng);
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let want_var = 2.0 / fan_in as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!(
            (var - want_var).abs() / want_var < 0.1,
            "var {var} want {want_var}"
        );
    }

    #[test]
    fn broadcast_channel_mask_matches_loop() {
        let mut rng = Rng::new(3);
        let (c, h, w) = (5, 4, 3);
        let x: Tensor = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let m: Tensor = Tensor::uniform(&[c, 1, 1], 0.0, 1.0, &mut rng);
        let got = broadcast_apply(&x, &m, |a, b| a * b).unwrap();
        // naive per-channel loop oracle
        let mut want = vec![0f32; c * h * w];
        for ci in 0..c {
            for s in 0..h * w {
                want[ci * h * w + s] = x.data()[ci * h * w + s] * m.data()[ci];
            }
        }
        assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn broadcast_equals_materialized_expansion() {
        let mut rng = Rng::new(9);
        let a: Tensor = Tensor::uniform(&[2, 3, 1, 4], -2.0, 2.0, &mut rng);
        let b: Tensor = Tensor::uniform(&[3, 5, 1], -2.0, 2.0, &mut rng);
        let out = broadcast_apply(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5, 4]);
        let ea = broadcast_materialize(&a, out.shape());
        let eb = broadcast_materialize(&b, out.shape());
        let want: Vec<f32> = ea
            .data()
            .iter()
            .zip(eb.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let a: Tensor = Tensor::zeros(&[2, 3]);
        let b: Tensor = Tensor::zeros(&[4, 3]);
        assert!(broadcast_apply(&a, &b, |x, _| x).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // grad ones over [2,3] reduced to [1,3] sums pairs of rows
        let grad = vec![1f32, 2.0, 3.0, 10.0, 20.0, 30.0];
        let red = reduce_to_shape(&grad, &[2, 3], &[1, 3]);
        assert_eq!(red, vec![11.0, 22.0, 33.0]);
        let red2 = reduce_to_shape(&grad, &[2, 3], &[2, 1]);
        assert_eq!(red2, vec![6.0, 60.0]);
    }

    #[test]
    fn serialization_round_trip_and_golden_bytes() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0f32, -0.5, 0.25, 3.0]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        // magic + rank + 2 extents + 4 floats
        assert_eq!(buf.len(), 4 + 4 + 8 + 16);
        assert_eq!(&buf[..4], b"RDCT");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        let back = Tensor::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn validate_finite_reports_index() {
        let t = Tensor::from_vec(&[3], vec![1.0f32, f32::INFINITY, 2.0]);
        let err = t.validate_finite("unit").unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }
}
