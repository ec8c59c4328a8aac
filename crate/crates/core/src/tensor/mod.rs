//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node holding its value and
//! whatever it needs for the backward pass. Node ids are therefore already in
//! topological order and [`Graph::backward`] walks them once, in reverse.
//! Parameters live outside the tape in a [`ParamStore`]; a graph binds each parameter
//! to exactly one leaf node, so reusing a parameter in several places (shared stacks)
//! accumulates its gradient additively.

mod checkpoint;
pub mod gradcheck;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use optim::{OptimKind, OptimState};

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Arg { op: &'static str, detail: String },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{0}' has no gradient")]
    MissingGrad(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(TensorError::Shape { op, detail })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "tensor",
                format!("{} values for shape {:?}", data.len(), shape),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Uniform in `[-limit, limit]` with `limit = sqrt(6 / fan_in)`.
    pub fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.random_range(-limit..=limit))
                .collect(),
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.random_range(lo..hi))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    /// Buffers such as running statistics are stored here but never optimised.
    pub trainable: bool,
}

/// Named parameters and buffers, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.params[i].value = value;
            self.params[i].trainable = trainable;
            self.params[i].grad = None;
            return ParamId(i);
        }
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .map(ParamId)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}

// ---------------------------------------------------------------------------
// Graph

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SoftmaxXent {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    RowL2(NodeId),
    RowL1(NodeId),
    Contrastive {
        d: NodeId,
        same: Vec<bool>,
        margin: f64,
    },
    SqErr {
        pred: NodeId,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation; see the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaf: HashMap<ParamId, NodeId>,
    param_uses: HashMap<ParamId, usize>,
}

/// Batch-norm running statistics, updated in training mode.
pub struct RunningStats<'a> {
    pub mean: &'a mut [f64],
    pub var: &'a mut [f64],
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// The single leaf bound to parameter `id` in this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        *self.param_uses.entry(id).or_insert(0) += 1;
        if let Some(&n) = self.param_leaf.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_leaf.insert(id, n);
        n
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// How many times `id` was requested while building this graph.
    pub fn param_uses(&self, id: ParamId) -> usize {
        self.param_uses.get(&id).copied().unwrap_or(0)
    }

    pub fn param_leaf(&self, id: ParamId) -> Option<NodeId> {
        self.param_leaf.get(&id).copied()
    }

    // -- ops ----------------------------------------------------------------

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]`, bias `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?} must be rank 4"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return shape_err(
                "conv2d",
                format!("input has {c} channels, kernel expects {wc} (input {xs:?}, kernel {ws:?})"),
            );
        }
        if bs != [o] {
            return shape_err("conv2d", format!("bias {bs:?} for {o} output channels"));
        }
        if stride == 0 {
            return Err(TensorError::Arg {
                op: "conv2d",
                detail: "stride 0".into(),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            );
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut cols = vec![0.0; n * ckk * hw];
        let mut out = vec![0.0; n * o * hw];
        for img in 0..n {
            let col = &mut cols[img * ckk * hw..(img + 1) * ckk * hw];
            im2col(
                &xv[img * c * h * wd..(img + 1) * c * h * wd],
                (c, h, wd),
                (kh, kw),
                stride,
                pad,
                (ho, wo),
                col,
            );
            let dst = &mut out[img * o * hw..(img + 1) * o * hw];
            for (oc, row) in dst.chunks_exact_mut(hw).enumerate() {
                row.fill(bv[oc]);
            }
            gemm(o, ckk, hw, wv, false, col, false, dst, 1.0);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, o, ho, wo],
                data: out,
            },
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    /// Max pooling with a `k x k` window; output size floors.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err("maxpool2d", format!("input {xs:?} must be rank 4"));
        }
        if k == 0 || stride == 0 {
            return Err(TensorError::Arg {
                op: "maxpool2d",
                detail: format!("k {k}, stride {stride}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < k || w < k {
            return shape_err("maxpool2d", format!("window {k} larger than {h}x{w}"));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xv = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, ho, wo],
                data: out,
            },
            Op::MaxPool { x, argmax },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` gives `x w^T + b`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return shape_err(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            );
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        let bv = &self.nodes[b.0].value.data;
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(bv);
        }
        gemm(
            n,
            i,
            o,
            &self.nodes[x.0].value.data,
            false,
            &self.nodes[w.0].value.data,
            true,
            &mut out,
            1.0,
        );
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, o],
                data: out,
            },
            Op::Dense { x, w, b },
            needs,
        ))
    }

    /// Elementwise multiply by a fixed mask (dropout with a given mask).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if mask.len() != v.numel() {
            return shape_err("mask", format!("{} mask values for {:?}", mask.len(), v.shape));
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Mask { x, mask }, needs))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`; identity outside training.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, train: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Arg {
                op: "dropout",
                detail: format!("p = {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mask(x, mask)
    }

    /// Batch normalisation over `[N, F]` (per feature) or `[N, C, H, W]` (per channel).
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: RunningStats<'_>,
        train: bool,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (n, f, inner) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return shape_err("batchnorm", format!("input {xs:?} must be rank 2 or 4")),
        };
        if self.shape(gamma) != [f] || self.shape(beta) != [f] || stats.mean.len() != f || stats.var.len() != f {
            return shape_err("batchnorm", format!("{f} features vs affine/stat shapes"));
        }
        if train && n < 2 {
            return Err(TensorError::Arg {
                op: "batchnorm",
                detail: "batch of 1 in training mode has no variance".into(),
            });
        }
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let bt = &self.nodes[beta.0].value.data;
        let m = (n * inner) as f64;
        let mut inv_std = vec![0.0; f];
        let mut mean = vec![0.0; f];
        if train {
            let mut var = vec![0.0; f];
            for s in 0..n {
                for ch in 0..f {
                    let base = (s * f + ch) * inner;
                    mean[ch] += xv[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for s in 0..n {
                for ch in 0..f {
                    let base = (s * f + ch) * inner;
                    var[ch] += xv[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            for ch in 0..f {
                inv_std[ch] = 1.0 / (var[ch] + BN_EPS).sqrt();
                let unbiased = var[ch] * m / (m - 1.0);
                stats.mean[ch] = stats.momentum * stats.mean[ch] + (1.0 - stats.momentum) * mean[ch];
                stats.var[ch] = stats.momentum * stats.var[ch] + (1.0 - stats.momentum) * unbiased;
            }
        } else {
            for ch in 0..f {
                mean[ch] = stats.mean[ch];
                inv_std[ch] = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
            }
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..f {
                let base = (s * f + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape: xs, data: out },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", v.shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    /// Concatenates `[N, F_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Arg {
                op: "concat",
                detail: "nothing to concatenate".into(),
            });
        }
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return shape_err("concat", format!("part {s:?} vs batch {n}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data[row * w..(row + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor {
                shape: vec![n, total],
                data: out,
            },
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let va = &self.nodes[a.0].value;
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x + y).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let va = &self.nodes[a.0].value;
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x - y).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * s).collect(),
        };
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(
                "softmax_xent",
                format!("logits {s:?} for {} labels", labels.len()),
            );
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Arg {
                op: "softmax_xent",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let lv = &self.nodes[logits.0].value.data;
        let probs = softmax_rows(lv, k);
        let mut loss = 0.0;
        for (row, &l) in labels.iter().enumerate() {
            let z = &lv[row * k..(row + 1) * k];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[l];
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Euclidean norm of each row of `[N, F]`.
    pub fn row_l2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, f) = self.rows("row_l2", x)?;
        let v = &self.nodes[x.0].value.data;
        let out = (0..n)
            .map(|r| v[r * f..(r + 1) * f].iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor { shape: vec![n], data: out }, Op::RowL2(x), needs))
    }

    /// L1 norm of each row of `[N, F]`.
    pub fn row_l1(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, f) = self.rows("row_l1", x)?;
        let v = &self.nodes[x.0].value.data;
        let out = (0..n)
            .map(|r| v[r * f..(r + 1) * f].iter().map(|a| a.abs()).sum::<f64>())
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor { shape: vec![n], data: out }, Op::RowL1(x), needs))
    }

    fn rows(&self, op: &'static str, x: NodeId) -> Result<(usize, usize)> {
        match self.shape(x) {
            [n, f] => Ok((*n, *f)),
            s => shape_err(op, format!("expected [N, F], got {s:?}")),
        }
    }

    /// Batch mean of `d` for same pairs and `max(margin - d, 0)` otherwise.
    pub fn contrastive(&mut self, d: NodeId, same: &[bool], margin: f64) -> Result<NodeId> {
        let dv = &self.nodes[d.0].value;
        if dv.shape != [same.len()] {
            return shape_err("contrastive", format!("distances {:?} for {} pairs", dv.shape, same.len()));
        }
        if !(margin > 0.0) {
            return Err(TensorError::Arg {
                op: "contrastive",
                detail: format!("margin {margin} must be positive"),
            });
        }
        let n = same.len().max(1) as f64;
        let loss = dv
            .data
            .iter()
            .zip(same)
            .map(|(&dist, &s)| if s { dist } else { (margin - dist).max(0.0) })
            .sum::<f64>()
            / n;
        let needs = self.needs(&[d]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Contrastive {
                d,
                same: same.to_vec(),
                margin,
            },
            needs,
        ))
    }

    /// Batch mean of the per-row summed squared error against a constant target.
    pub fn sq_err(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let pv = &self.nodes[pred.0].value;
        if pv.shape != target.shape || pv.shape.is_empty() {
            return shape_err("sq_err", format!("prediction {:?} vs target {:?}", pv.shape, target.shape));
        }
        let n = pv.shape[0].max(1) as f64;
        let loss = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SqErr {
                pred,
                target: target.data.clone(),
            },
            needs,
        ))
    }

    // -- backward -----------------------------------------------------------

    fn acc(&mut self, id: NodeId, g: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Reverse pass from a scalar `loss`; gradients accumulate on every reachable node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].value.shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &gy);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, gy: &[f64]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let ys = self.nodes[i].value.shape.clone();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (ys[2], ys[3]);
                let ckk = c * kh * kw;
                let hw = ho * wo;
                if self.wants(*b) {
                    let mut gb = vec![0.0; o];
                    for img in 0..n {
                        for (oc, g) in gb.iter_mut().enumerate() {
                            let off = (img * o + oc) * hw;
                            *g += gy[off..off + hw].iter().sum::<f64>();
                        }
                    }
                    self.acc(*b, &gb);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; o * ckk];
                    for img in 0..n {
                        let g = &gy[img * o * hw..(img + 1) * o * hw];
                        let col = &cols[img * ckk * hw..(img + 1) * ckk * hw];
                        gemm(o, hw, ckk, g, false, col, true, &mut gw, 1.0);
                    }
                    self.acc(*w, &gw);
                }
                if self.wants(*x) {
                    let wv = self.nodes[w.0].value.data.clone();
                    let mut gx = vec![0.0; n * c * h * wd];
                    let mut dcol = vec![0.0; ckk * hw];
                    for img in 0..n {
                        dcol.fill(0.0);
                        let g = &gy[img * o * hw..(img + 1) * o * hw];
                        gemm(ckk, o, hw, &wv, true, g, false, &mut dcol, 1.0);
                        col2im(
                            &dcol,
                            (c, h, wd),
                            (kh, kw),
                            *stride,
                            *pad,
                            (ho, wo),
                            &mut gx[img * c * h * wd..(img + 1) * c * h * wd],
                        );
                    }
                    self.acc(*x, &gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (g, &at) in gy.iter().zip(argmax) {
                        gx[at] += g;
                    }
                    self.acc(*x, &gx);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let gx: Vec<f64> = self.nodes[x.0]
                        .value
                        .data
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.acc(*x, &gx);
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let o = self.shape(*w)[0];
                let (n, inp) = (xs[0], xs[1]);
                if self.wants(*b) {
                    let mut gb = vec![0.0; o];
                    for row in gy.chunks_exact(o) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.acc(*b, &gb);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; o * inp];
                    gemm(o, n, inp, gy, true, &self.nodes[x.0].value.data, false, &mut gw, 1.0);
                    self.acc(*w, &gw);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * inp];
                    gemm(n, o, inp, gy, false, &self.nodes[w.0].value.data, false, &mut gx, 1.0);
                    self.acc(*x, &gx);
                }
            }
            Op::Mask { x, mask } => {
                let gx: Vec<f64> = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc(*x, &gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x).to_vec();
                let (n, f, inner) = match xs.len() {
                    2 => (xs[0], xs[1], 1),
                    _ => (xs[0], xs[1], xs[2] * xs[3]),
                };
                let g = self.nodes[gamma.0].value.data.clone();
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for s in 0..n {
                    for ch in 0..f {
                        let base = (s * f + ch) * inner;
                        for k in base..base + inner {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * xhat[k];
                        }
                    }
                }
                self.acc(*gamma, &sum_dy_xhat);
                self.acc(*beta, &sum_dy);
                if self.wants(*x) {
                    let m = (n * inner) as f64;
                    let mut gx = vec![0.0; gy.len()];
                    for s in 0..n {
                        for ch in 0..f {
                            let base = (s * f + ch) * inner;
                            for k in base..base + inner {
                                gx[k] = if *train {
                                    g[ch] * inv_std[ch]
                                        * (gy[k] - sum_dy[ch] / m - xhat[k] * sum_dy_xhat[ch] / m)
                                } else {
                                    g[ch] * inv_std[ch] * gy[k]
                                };
                            }
                        }
                    }
                    self.acc(*x, &gx);
                }
            }
            Op::Reshape(x) => self.acc(*x, gy),
            Op::Concat(parts) => {
                let n = self.nodes[i].value.shape[0];
                let total = self.nodes[i].value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for row in 0..n {
                            gp.extend_from_slice(&gy[row * total + offset..row * total + offset + w]);
                        }
                        self.acc(p, &gp);
                    }
                    offset += w;
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, gy);
                self.acc(*b, gy);
            }
            Op::Sub(a, b) => {
                self.acc(*a, gy);
                let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                self.acc(*b, &neg);
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = gy.iter().map(|g| g * s).collect();
                self.acc(*x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![gy[0]; self.value(*x).numel()];
                self.acc(*x, &gx);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = gy[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    gx[row * k + l] -= scale;
                }
                self.acc(*logits, &gx);
            }
            Op::RowL2(x) => {
                let f = self.shape(*x)[1];
                let d = self.nodes[i].value.data.clone();
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let r = k / f;
                        if d[r] > 0.0 {
                            gy[r] * v / d[r]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(*x, &gx);
            }
            Op::RowL1(x) => {
                let f = self.shape(*x)[1];
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        if v > 0.0 {
                            gy[k / f]
                        } else if v < 0.0 {
                            -gy[k / f]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(*x, &gx);
            }
            Op::Contrastive { d, same, margin } => {
                let n = same.len().max(1) as f64;
                let gx: Vec<f64> = self.nodes[d.0]
                    .value
                    .data
                    .iter()
                    .zip(same)
                    .map(|(&dist, &s)| {
                        let local = if s {
                            1.0
                        } else if dist < *margin {
                            -1.0
                        } else {
                            0.0
                        };
                        gy[0] * local / n
                    })
                    .collect();
                self.acc(*d, &gx);
            }
            Op::SqErr { pred, target } => {
                let n = self.shape(*pred)[0].max(1) as f64;
                let gx: Vec<f64> = self.nodes[pred.0]
                    .value
                    .data
                    .iter()
                    .zip(target)
                    .map(|(p, t)| gy[0] * 2.0 * (p - t) / n)
                    .collect();
                self.acc(*pred, &gx);
            }
        }
    }

    /// Adds each bound parameter's leaf gradient into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        let mut bound: Vec<(&ParamId, &NodeId)> = self.param_leaf.iter().collect();
        bound.sort();
        for (&pid, &nid) in bound {
            let Some(g) = self.nodes[nid.0].grad.as_ref() else {
                continue;
            };
            let p = store.get_mut(pid);
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.clone()),
            }
        }
    }
}

/// Row-wise softmax of a `[N, k]` buffer.
pub fn softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

/// `c += a(m x k) * b(k x n)`, where `a`/`b` may be stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the (m, k, n) extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    gx: &mut [f64],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
