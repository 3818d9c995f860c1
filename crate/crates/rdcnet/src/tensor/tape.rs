//! Reverse-mode autodiff on a write-once tape.
//!
//! Recording a forward pass appends one node per op, each holding its
//! output value and the indices of its inputs. `backward` replays the tape
//! in exact reverse recording order, accumulating gradients additively into
//! a scratch table, so a value used twice receives both contributions and
//! running backward twice doubles whatever is exported to the parameter
//! store. Gradients are linear in the number of backward calls; clearing
//! them is the optimizer's explicit job.
//!
//! Shape misuse (wrong rank, mismatched extents) is a bug in the caller
//! and panics. Only contracts that user data can violate surface as
//! `Result` (batch norm population size).

use crate::error::Result;
use crate::nn::conv::{self, ConvSpec};
use crate::nn::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::nn::norm;
use crate::nn::pool;
use crate::nn::resize;
use crate::tensor::{broadcast_apply, reduce_to_shape, Elem, ParamId, ParamStore, Tensor};

/// Handle to a tape node. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    SumSpatial(usize),
    GlobalAvgPool(usize),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        spec: ConvSpec,
    },
    BnTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LogSoftmaxRows(usize),
    SoftmaxSpatial(usize),
    AvgPool {
        x: usize,
        k: usize,
        s: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Bilinear(usize),
    ConcatChannels(Vec<usize>),
    SliceChannels {
        x: usize,
        start: usize,
    },
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::SumSpatial(..) => "sum_spatial",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BnTrain { .. } => "batch_norm",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::SoftmaxSpatial(..) => "softmax_spatial",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::Bilinear(..) => "bilinear",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-channel batch statistics a normalization layer needs expose for its
/// running-average update.
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradient table produced by one backward pass. Indexed by the `Var`s of
/// the tape it came from; nodes unreachable from the loss hold `None`.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input: data batches, masks, fixed coefficients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a parameter (gradient-check probes).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; its gradient is routed back to `id` on export.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── forward ops ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x + y)
            .expect("add: incompatible shapes");
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x - y)
            .expect("sub: incompatible shapes");
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x * y)
            .expect("mul: incompatible shapes");
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    /// Elementwise quotient. Division by an exact zero produces an
    /// infinity/NaN in the output rather than trapping; `first_nonfinite`
    /// catches it at the next checkpoint.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x / y)
            .expect("div: incompatible shapes");
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Div(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Exp(a.0), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Log(a.0), ng)
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let ng = self.ng(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[N,C,H,W] -> [N,C,1,1]` spatial sum.
    pub fn sum_spatial(&mut self, a: Var) -> Var {
        let sh = self.shape(a);
        assert_eq!(sh.len(), 4, "sum_spatial expects [N,C,H,W]");
        let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        let ng = self.ng(&[a.0]);
        self.push(
            Tensor::from_vec(&[n, c, 1, 1], out),
            Op::SumSpatial(a.0),
            ng,
        )
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let v = pool::global_avg_pool(self.value(a));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::GlobalAvgPool(a.0), ng)
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        let ng = self.ng(&[a.0, b.0]);
        self.push(Tensor::from_vec(&[m, n], out), Op::Matmul(a.0, b.0), ng)
    }

    /// Affine map of row-vectors: `[N,Cin] x [Cin,K] + [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let v = conv::conv2d_im2col(self.value(x), self.value(w), spec);
        let ng = self.ng(&[x.0, w.0]);
        self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                spec,
            },
            ng,
        )
    }

    /// Train-mode batch norm. Fails when the per-channel population is
    /// below two values. Returns the batch stats so the caller can update
    /// its running averages.
    pub fn bn_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnStats<T>)> {
        let out = norm::bn_train_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let ng = self.ng(&[x.0, gamma.0, beta.0]);
        let stats = BnStats {
            mean: out.mean.clone(),
            var_unbiased: out.var_unbiased,
        };
        let v = self.push(
            out.y,
            Op::BnTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: out.mean,
                inv_std: out.inv_std,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Rows of `[N,K]` shifted to log-probabilities (stable log-softmax).
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let sh = self.shape(a);
        assert_eq!(sh.len(), 2, "log_softmax_rows expects [N,K]");
        let (n, k) = (sh[0], sh[1]);
        let xd = self.value(a).data();
        let mut out = vec![T::zero(); n * k];
        for r in 0..n {
            let row = &xd[r * k..(r + 1) * k];
            let mx = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
            let lse = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mx).exp())
                .ln()
                + mx;
            for i in 0..k {
                out[r * k + i] = row[i] - lse;
            }
        }
        let ng = self.ng(&[a.0]);
        self.push(Tensor::from_vec(&[n, k], out), Op::LogSoftmaxRows(a.0), ng)
    }

    /// Softmax over the joint spatial extent of each `(n, c)` plane of
    /// `[N,C,H,W]`; every plane sums to one.
    pub fn softmax_spatial(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 4, "softmax_spatial expects [N,C,H,W]");
        let hw = sh[2] * sh[3];
        let xd = self.value(a).data();
        let mut out = vec![T::zero(); xd.len()];
        for (plane, chunk) in xd.chunks_exact(hw).enumerate() {
            let mx = chunk
                .iter()
                .fold(chunk[0], |m, &v| if v > m { v } else { m });
            let mut denom = T::zero();
            for (i, &v) in chunk.iter().enumerate() {
                let e = (v - mx).exp();
                out[plane * hw + i] = e;
                denom += e;
            }
            let inv = denom.recip();
            for v in &mut out[plane * hw..(plane + 1) * hw] {
                *v *= inv;
            }
        }
        let ng = self.ng(&[a.0]);
        self.push(Tensor::from_vec(&sh, out), Op::SoftmaxSpatial(a.0), ng)
    }

    pub fn avg_pool(&mut self, a: Var, k: usize, s: usize) -> Var {
        let v = pool::avg_pool(self.value(a), k, s);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::AvgPool { x: a.0, k, s }, ng)
    }

    pub fn max_pool(&mut self, a: Var, k: usize, s: usize, p: usize) -> Var {
        let (v, argmax) = pool::max_pool(self.value(a), k, s, p);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::MaxPool { x: a.0, argmax }, ng)
    }

    pub fn bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let v = resize::bilinear_resize(self.value(a), oh, ow);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Bilinear(a.0), ng)
    }

    /// Concatenate along the channel axis of `[N,C_i,H,W]` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 4);
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            assert!(
                sh[0] == n && sh[2] == h && sh[3] == w,
                "concat parts disagree: {first:?} vs {sh:?}"
            );
            c_total += sh[1];
        }
        let mut out = Vec::with_capacity(n * c_total * h * w);
        for ni in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                let block = &self.value(p).data()[ni * c * h * w..(ni + 1) * c * h * w];
                out.extend_from_slice(block);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(
            Tensor::from_vec(&[n, c_total, h, w], out),
            Op::ConcatChannels(ids),
            ng,
        )
    }

    /// Channels `[start, start+len)` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 4);
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(
            start + len <= c,
            "slice {start}..{} of {c} channels",
            start + len
        );
        let hw = h * w;
        let xd = self.value(a).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            let off = (ni * c + start) * hw;
            out.extend_from_slice(&xd[off..off + len * hw]);
        }
        let ng = self.ng(&[a.0]);
        self.push(
            Tensor::from_vec(&[n, len, h, w], out),
            Op::SliceChannels { x: a.0, start },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Reshape(a.0), ng)
    }

    // ── backward ─────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) from a scalar loss to every node that
    /// needs a gradient. The tape itself is untouched; call it again and
    /// you get the same table again.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Adds the parameter-leaf gradients of `grads` into the store.
    pub fn export_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate_grad(pid, g);
            }
        }
    }

    /// First node (recording order) holding a NaN or infinity, with its op
    /// name: the diagnostic for divergence aborts.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.data().iter().any(|v| !v.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], j: usize, vals: &[T]) {
        if !self.nodes[j].needs_grad {
            return;
        }
        let slot = grads[j].get_or_insert_with(|| vec![T::zero(); self.nodes[j].value.numel()]);
        debug_assert_eq!(slot.len(), vals.len());
        for (d, &s) in slot.iter_mut().zip(vals) {
            *d += s;
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], j: usize) -> &'g mut Vec<T> {
        grads[j].get_or_insert_with(|| vec![T::zero(); self.nodes[j].value.numel()])
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    if self.nodes[j].needs_grad {
                        let red = reduce_to_shape(g, out_shape, self.nodes[j].value.shape());
                        self.add_into(grads, j, &red);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].needs_grad {
                    let red = reduce_to_shape(g, out_shape, self.nodes[*a].value.shape());
                    self.add_into(grads, *a, &red);
                }
                if self.nodes[*b].needs_grad {
                    let mut red = reduce_to_shape(g, out_shape, self.nodes[*b].value.shape());
                    for v in &mut red {
                        *v = -*v;
                    }
                    self.add_into(grads, *b, &red);
                }
            }
            Op::Mul(a, b) => {
                let gt = Tensor::from_vec(out_shape, g.to_vec());
                for (&j, &other) in [(a, b), (b, a)] {
                    if !self.nodes[j].needs_grad {
                        continue;
                    }
                    let prod = broadcast_apply(&gt, &self.nodes[other].value, |x, y| x * y)
                        .expect("shapes already validated in forward");
                    let red = reduce_to_shape(prod.data(), out_shape, self.nodes[j].value.shape());
                    self.add_into(grads, j, &red);
                }
            }
            Op::Div(a, b) => {
                let gt = Tensor::from_vec(out_shape, g.to_vec());
                if self.nodes[*a].needs_grad {
                    let da = broadcast_apply(&gt, &self.nodes[*b].value, |gv, bv| gv / bv)
                        .expect("shapes already validated in forward");
                    let red = reduce_to_shape(da.data(), out_shape, self.nodes[*a].value.shape());
                    self.add_into(grads, *a, &red);
                }
                if self.nodes[*b].needs_grad {
                    // d(a/b)/db = -a / b^2 = -y / b, with y the forward output.
                    let gy = broadcast_apply(&gt, &self.nodes[i].value, |gv, yv| gv * yv)
                        .expect("same shape as output");
                    let db = broadcast_apply(&gy, &self.nodes[*b].value, |v, bv| -(v / bv))
                        .expect("shapes already validated in forward");
                    let red = reduce_to_shape(db.data(), out_shape, self.nodes[*b].value.shape());
                    self.add_into(grads, *b, &red);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].needs_grad {
                    let vals: Vec<T> = g.iter().map(|&v| v * *c).collect();
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].needs_grad {
                    let x = self.nodes[*a].value.data();
                    let vals: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[*a].needs_grad {
                    let y = self.nodes[i].value.data();
                    let vals: Vec<T> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::Exp(a) => {
                if self.nodes[*a].needs_grad {
                    let y = self.nodes[i].value.data();
                    let vals: Vec<T> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::Log(a) => {
                if self.nodes[*a].needs_grad {
                    let x = self.nodes[*a].value.data();
                    let vals: Vec<T> = g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].needs_grad {
                    let n = self.nodes[*a].value.numel();
                    self.add_into(grads, *a, &vec![g[0]; n]);
                }
            }
            Op::SumSpatial(a) => {
                if self.nodes[*a].needs_grad {
                    let sh = self.nodes[*a].value.shape();
                    let hw = sh[2] * sh[3];
                    let mut vals = Vec::with_capacity(self.nodes[*a].value.numel());
                    for &gv in g {
                        vals.extend(std::iter::repeat_n(gv, hw));
                    }
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.nodes[*a].needs_grad {
                    let vals = pool::global_avg_pool_backward(self.nodes[*a].value.shape(), g);
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let sa = self.nodes[*a].value.shape();
                    (sa[0], sa[1])
                };
                let n = self.nodes[*b].value.shape()[1];
                if self.nodes[*a].needs_grad {
                    let bv = self.nodes[*b].value.data().to_vec();
                    let da = self.slot(grads, *a);
                    gemm_nt(da, g, &bv, m, n, k);
                }
                if self.nodes[*b].needs_grad {
                    let av = self.nodes[*a].value.data().to_vec();
                    let db = self.slot(grads, *b);
                    gemm_tn(db, &av, g, k, m, n);
                }
            }
            Op::Conv2d { x, w, spec } => {
                let gt = Tensor::from_vec(out_shape, g.to_vec());
                let (dx, dw) =
                    conv::conv2d_backward(&self.nodes[*x].value, &self.nodes[*w].value, *spec, &gt);
                self.add_into(grads, *x, dx.data());
                self.add_into(grads, *w, dw.data());
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) = norm::bn_train_backward(
                    &self.nodes[*x].value,
                    self.nodes[*gamma].value.data(),
                    mean,
                    inv_std,
                    g,
                );
                self.add_into(grads, *x, &dx);
                self.add_into(grads, *gamma, &dgamma);
                self.add_into(grads, *beta, &dbeta);
            }
            Op::LogSoftmaxRows(a) => {
                if self.nodes[*a].needs_grad {
                    let sh = self.nodes[i].value.shape();
                    let (n, k) = (sh[0], sh[1]);
                    let y = self.nodes[i].value.data();
                    let mut vals = vec![T::zero(); n * k];
                    for r in 0..n {
                        let gr = &g[r * k..(r + 1) * k];
                        let s = gr.iter().fold(T::zero(), |acc, &v| acc + v);
                        for c in 0..k {
                            vals[r * k + c] = gr[c] - y[r * k + c].exp() * s;
                        }
                    }
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::SoftmaxSpatial(a) => {
                if self.nodes[*a].needs_grad {
                    let sh = self.nodes[i].value.shape();
                    let hw = sh[2] * sh[3];
                    let s = self.nodes[i].value.data();
                    let mut vals = vec![T::zero(); s.len()];
                    for plane in 0..s.len() / hw {
                        let off = plane * hw;
                        let mut dot = T::zero();
                        for q in 0..hw {
                            dot += g[off + q] * s[off + q];
                        }
                        for q in 0..hw {
                            vals[off + q] = s[off + q] * (g[off + q] - dot);
                        }
                    }
                    self.add_into(grads, *a, &vals);
                }
            }
            Op::AvgPool { x, k, s } => {
                if self.nodes[*x].needs_grad {
                    let gt = Tensor::from_vec(out_shape, g.to_vec());
                    let dx = pool::avg_pool_backward(self.nodes[*x].value.shape(), *k, *s, &gt);
                    self.add_into(grads, *x, dx.data());
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.nodes[*x].needs_grad {
                    let dx = pool::max_pool_backward(self.nodes[*x].value.numel(), argmax, g);
                    self.add_into(grads, *x, &dx);
                }
            }
            Op::Bilinear(a) => {
                if self.nodes[*a].needs_grad {
                    let gt = Tensor::from_vec(out_shape, g.to_vec());
                    let dx = resize::bilinear_resize_backward(self.nodes[*a].value.shape(), &gt);
                    self.add_into(grads, *a, dx.data());
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, h, w) = (out_shape[0], out_shape[2], out_shape[3]);
                let c_total = out_shape[1];
                let hw = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if self.nodes[p].needs_grad {
                        let mut vals = Vec::with_capacity(n * c * hw);
                        for ni in 0..n {
                            let off = (ni * c_total + c_off) * hw;
                            vals.extend_from_slice(&g[off..off + c * hw]);
                        }
                        self.add_into(grads, p, &vals);
                    }
                    c_off += c;
                }
            }
            Op::SliceChannels { x, start } => {
                if self.nodes[*x].needs_grad {
                    let sh = self.nodes[*x].value.shape();
                    let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                    let len = out_shape[1];
                    let dst = self.slot(grads, *x);
                    for ni in 0..n {
                        let src = &g[ni * len * hw..(ni + 1) * len * hw];
                        let off = (ni * c + start) * hw;
                        for (d, &sv) in dst[off..off + len * hw].iter_mut().zip(src) {
                            *d += sv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                self.add_into(grads, *a, g);
            }
        }
    }
}
