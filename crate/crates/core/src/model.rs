//! Shared-weight backbone and the heads built on its embedding.
//!
//! One [`ParamStore`] holds every weight. A triplet forward runs the same backbone three
//! times inside one [`Graph`]; because the graph binds each parameter to a single leaf,
//! the three stacks literally share tensors and their gradients sum at that leaf.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Frame, FrameShape, KeypointSet};
use crate::tensor::{
    Checkpoint, Graph, NodeId, OptimKind, OptimState, ParamStore, RunningStats, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("input frame {got} does not match backbone input {want}")]
    Input { got: FrameShape, want: FrameShape },
    #[error("model has no '{0}' head")]
    NoHead(String),
    #[error("keypoint count mismatch: head predicts {head}, ground truth has {gt}")]
    Keypoints { head: usize, gt: usize },
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One convolution stage: conv (`kernel`, `stride`, same padding), optional batch norm,
/// relu, then max pooling with window and stride `pool` (`pool <= 1` disables it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub pool: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input: FrameShape,
    pub stages: Vec<StageConfig>,
    pub embed_dim: usize,
    pub use_batchnorm: bool,
    pub dropout_p: f64,
    /// Subtract `input_mean` per channel before the first conv.
    pub mean_subtract: bool,
    pub input_mean: Vec<f64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |channels| StageConfig {
            channels,
            kernel: 3,
            stride: 1,
            pool: 2,
        };
        Self {
            input: FrameShape::new(32, 32, 1),
            stages: vec![stage(16), stage(32), stage(64)],
            embed_dim: 128,
            use_batchnorm: true,
            dropout_p: 0.5,
            mean_subtract: true,
            input_mean: vec![0.0],
        }
    }
}

/// Spatial geometry of one layer, used for receptive-field composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// A named layer whose output is a spatial map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Geometry of every layer from the input up to and including this one.
    pub chain: Vec<LayerGeom>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim < 8 {
            return bad(format!("embed_dim {} < 8", self.embed_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.input_mean.len() != self.input.channels {
            return bad(format!(
                "input_mean has {} entries for {} channels",
                self.input_mean.len(),
                self.input.channels
            ));
        }
        if self.stages.is_empty() {
            return bad("no conv stages".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                return bad(format!("stage {i}: zero channels, kernel or stride"));
            }
        }
        let last = self.layers().pop().expect("non-empty");
        if last.height == 0 || last.width == 0 {
            return bad(format!(
                "stages reduce {}x{} input to an empty map",
                self.input.width, self.input.height
            ));
        }
        Ok(())
    }

    /// Output maps of every conv and pool layer, in order. Dims may reach zero for
    /// invalid configs; [`validate`](Self::validate) rejects those.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut chain = Vec::new();
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let pad = s.kernel / 2;
            h = (h + 2 * pad).checked_sub(s.kernel).map_or(0, |v| v / s.stride + 1);
            w = (w + 2 * pad).checked_sub(s.kernel).map_or(0, |v| v / s.stride + 1);
            chain.push(LayerGeom {
                kernel: s.kernel,
                stride: s.stride,
                pad,
            });
            out.push(LayerInfo {
                name: format!("conv{}", i + 1),
                channels: s.channels,
                height: h,
                width: w,
                chain: chain.clone(),
            });
            if s.pool > 1 {
                h = h.checked_sub(s.pool).map_or(0, |v| v / s.pool + 1);
                w = w.checked_sub(s.pool).map_or(0, |v| v / s.pool + 1);
                chain.push(LayerGeom {
                    kernel: s.pool,
                    stride: s.pool,
                    pad: 0,
                });
                out.push(LayerInfo {
                    name: format!("pool{}", i + 1),
                    channels: s.channels,
                    height: h,
                    width: w,
                    chain: chain.clone(),
                });
            }
        }
        out
    }

    pub fn layer(&self, name: &str) -> Option<LayerInfo> {
        self.layers().into_iter().find(|l| l.name == name)
    }

    pub fn flat_dim(&self) -> usize {
        let last = self.layers().pop().expect("at least one stage");
        last.channels * last.height * last.width
    }

    /// Stable 64-bit digest of the JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Pair heads share one parameter set; the label meaning differs per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairTask {
    Close,
    Order,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub distance: Distance,
    pub close_tau: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            distance: Distance::L2,
            close_tau: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Head {
    Triplet,
    Pair,
    Classify { classes: usize },
    Pose { keypoints: Vec<String> },
}

impl Head {
    pub fn name(&self) -> &'static str {
        match self {
            Head::Triplet => "triplet",
            Head::Pair => "pair",
            Head::Classify { .. } => "classify",
            Head::Pose { .. } => "pose",
        }
    }

    fn dims(&self, embed: usize) -> (usize, usize) {
        match self {
            Head::Triplet => (2, 3 * embed),
            Head::Pair => (2, 2 * embed),
            Head::Classify { classes } => (*classes, embed),
            Head::Pose { keypoints } => (2 * keypoints.len(), embed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub store: ParamStore,
    pub heads: Vec<Head>,
}

impl Model {
    /// He-uniform backbone with no heads.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = config.input.channels;
        for (i, s) in config.stages.iter().enumerate() {
            let n = i + 1;
            let fan_in = cin * s.kernel * s.kernel;
            store.insert(
                &format!("conv{n}.w"),
                Tensor::he_uniform(&[s.channels, cin, s.kernel, s.kernel], fan_in, &mut rng),
                true,
            );
            store.insert(&format!("conv{n}.b"), Tensor::zeros(&[s.channels]), true);
            if config.use_batchnorm {
                insert_bn(&mut store, &format!("bn{n}"), s.channels);
            }
            cin = s.channels;
        }
        let flat = config.flat_dim();
        store.insert(
            "fc.w",
            Tensor::he_uniform(&[config.embed_dim, flat], flat, &mut rng),
            true,
        );
        store.insert("fc.b", Tensor::zeros(&[config.embed_dim]), true);
        if config.use_batchnorm {
            insert_bn(&mut store, "bnfc", config.embed_dim);
        }
        Ok(Self {
            config,
            store,
            heads: Vec::new(),
        })
    }

    /// Adds (or re-initialises) a head with small uniform weights.
    pub fn add_head<R: Rng>(&mut self, head: Head, rng: &mut R) {
        let (o, i) = head.dims(self.config.embed_dim);
        let limit = (1.0 / i as f64).sqrt();
        let name = head.name();
        self.store.insert(
            &format!("head.{name}.w"),
            Tensor::uniform(&[o, i], -limit, limit, rng),
            true,
        );
        self.store
            .insert(&format!("head.{name}.b"), Tensor::zeros(&[o]), true);
        self.heads.retain(|h| h.name() != name);
        self.heads.push(head);
    }

    /// Drops every head, keeping the backbone.
    pub fn strip_heads(&mut self) {
        self.store.remove_prefix("head.");
        self.heads.clear();
    }

    pub fn head(&self, name: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.name() == name)
    }

    /// Sets every head weight and bias to zero.
    pub fn zero_head(&mut self, name: &str) -> Result<()> {
        for suffix in ["w", "b"] {
            let p = self
                .store
                .by_name_mut(&format!("head.{name}.{suffix}"))
                .ok_or_else(|| ModelError::NoHead(name.into()))?;
            p.value.data.fill(0.0);
        }
        Ok(())
    }

    /// Trainable scalars whose names start with `prefix` (empty for all).
    pub fn param_count(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.param_count("") - self.param_count("head.")
    }

    /// Stacks frames into a normalised `[N, C, H, W]` tensor.
    pub fn frames_to_tensor(&self, frames: &[&[f32]]) -> Result<Tensor> {
        let s = self.config.input;
        let (c, hw) = (s.channels, s.width * s.height);
        let mut data = Vec::with_capacity(frames.len() * s.len());
        for f in frames {
            if f.len() != s.len() {
                return Err(ModelError::Config(format!(
                    "frame buffer of {} values for input {s}",
                    f.len()
                )));
            }
            for ch in 0..c {
                let m = if self.config.mean_subtract {
                    self.config.input_mean[ch]
                } else {
                    0.0
                };
                data.extend((0..hw).map(|p| f[p * c + ch] as f64 - m));
            }
        }
        Ok(Tensor::new(vec![frames.len(), c, s.height, s.width], data)?)
    }

    fn check_frame(&self, f: &Frame) -> Result<()> {
        if f.shape != self.config.input {
            return Err(ModelError::Input {
                got: f.shape,
                want: self.config.input,
            });
        }
        Ok(())
    }

    fn bn(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        prefix: &str,
        mode: Mode,
    ) -> Result<NodeId> {
        let gamma = g.param_by_name(&self.store, &format!("{prefix}.gamma"))?;
        let beta = g.param_by_name(&self.store, &format!("{prefix}.beta"))?;
        let mean_id = self.store.id(&format!("{prefix}.mean"))?;
        let var_id = self.store.id(&format!("{prefix}.var"))?;
        let mut mean = std::mem::take(&mut self.store.get_mut(mean_id).value.data);
        let mut var = std::mem::take(&mut self.store.get_mut(var_id).value.data);
        let out = g.batchnorm(
            x,
            gamma,
            beta,
            RunningStats {
                mean: &mut mean,
                var: &mut var,
                momentum: BN_MOMENTUM,
            },
            mode == Mode::Train,
        );
        self.store.get_mut(mean_id).value.data = mean;
        self.store.get_mut(var_id).value.data = var;
        Ok(out?)
    }

    /// Runs the backbone on `x: [N, C, H, W]`, returning the embedding node and the
    /// named conv/pool outputs.
    pub fn trace<R: Rng>(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let mut h = x;
        let mut named = Vec::new();
        for i in 0..self.config.stages.len() {
            let n = i + 1;
            let s = self.config.stages[i].clone();
            let w = g.param_by_name(&self.store, &format!("conv{n}.w"))?;
            let b = g.param_by_name(&self.store, &format!("conv{n}.b"))?;
            h = g.conv2d(h, w, b, s.stride, s.kernel / 2)?;
            if self.config.use_batchnorm {
                h = self.bn(g, h, &format!("bn{n}"), mode)?;
            }
            h = g.relu(h);
            named.push((format!("conv{n}"), h));
            if s.pool > 1 {
                h = g.maxpool2d(h, s.pool, s.pool)?;
                named.push((format!("pool{n}"), h));
            }
        }
        h = g.flatten(h)?;
        let w = g.param_by_name(&self.store, "fc.w")?;
        let b = g.param_by_name(&self.store, "fc.b")?;
        h = g.dense(h, w, b)?;
        if self.config.use_batchnorm {
            h = self.bn(g, h, "bnfc", mode)?;
        }
        h = g.relu(h);
        h = g.dropout(h, self.config.dropout_p, mode == Mode::Train, rng)?;
        Ok((h, named))
    }

    pub fn embed_batch<R: Rng>(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        Ok(self.trace(g, x, mode, rng)?.0)
    }

    fn head_nodes(&self, g: &mut Graph, name: &str) -> Result<(NodeId, NodeId)> {
        if self.head(name).is_none() {
            return Err(ModelError::NoHead(name.into()));
        }
        Ok((
            g.param_by_name(&self.store, &format!("head.{name}.w"))?,
            g.param_by_name(&self.store, &format!("head.{name}.b"))?,
        ))
    }

    /// Linear head on the concatenated embeddings of three stacks.
    pub fn triplet_logits<R: Rng>(
        &mut self,
        g: &mut Graph,
        xs: [NodeId; 3],
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let n = g.shape(xs[0])[0];
        if xs.iter().any(|&x| g.shape(x) != g.shape(xs[0])) {
            return Err(TensorError::Shape {
                op: "triplet_logits",
                detail: format!("frame batches {:?}", xs.map(|x| g.shape(x).to_vec())),
            }
            .into());
        }
        debug_assert!(n > 0);
        let e = xs
            .iter()
            .map(|&x| self.embed_batch(g, x, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&e)?;
        let (w, b) = self.head_nodes(g, "triplet")?;
        Ok(g.dense(cat, w, b)?)
    }

    /// Linear head on two concatenated embeddings. `task` only fixes label semantics.
    pub fn pair_logits<R: Rng>(
        &mut self,
        g: &mut Graph,
        xs: [NodeId; 2],
        _task: PairTask,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if g.shape(xs[0]) != g.shape(xs[1]) {
            return Err(TensorError::Shape {
                op: "pair_logits",
                detail: format!("{:?} vs {:?}", g.shape(xs[0]), g.shape(xs[1])),
            }
            .into());
        }
        let e1 = self.embed_batch(g, xs[0], mode, rng)?;
        let e2 = self.embed_batch(g, xs[1], mode, rng)?;
        let cat = g.concat(&[e1, e2])?;
        let (w, b) = self.head_nodes(g, "pair")?;
        Ok(g.dense(cat, w, b)?)
    }

    pub fn classify_logits<R: Rng>(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let e = self.embed_batch(g, x, mode, rng)?;
        let (w, b) = self.head_nodes(g, "classify")?;
        Ok(g.dense(e, w, b)?)
    }

    /// `[N, 2K]` keypoint coordinates `(x0, y0, x1, y1, ...)` normalised by frame size.
    pub fn regress_keypoints<R: Rng>(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let e = self.embed_batch(g, x, mode, rng)?;
        let (w, b) = self.head_nodes(g, "pose")?;
        Ok(g.dense(e, w, b)?)
    }

    /// Inference embedding of one frame.
    pub fn embed(&mut self, frame: &Frame) -> Result<Vec<f64>> {
        Ok(self.embed_frames(&[frame])?.remove(0))
    }

    /// Inference embeddings of a batch of frames.
    pub fn embed_frames(&mut self, frames: &[&Frame]) -> Result<Vec<Vec<f64>>> {
        for f in frames {
            self.check_frame(f)?;
        }
        let bufs: Vec<&[f32]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
        let t = self.frames_to_tensor(&bufs)?;
        let mut g = Graph::new();
        let x = g.input(t);
        let e = self.embed_batch(&mut g, x, Mode::Infer, &mut NoRng)?;
        let d = self.config.embed_dim;
        Ok(g.value(e).data.chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Inference forward of a head on frames; `[N, out]` rows.
    pub fn infer_head(&mut self, head: &str, groups: &[Vec<&[f32]>]) -> Result<Vec<Vec<f64>>> {
        let arity = match head {
            "triplet" => 3,
            "pair" => 2,
            _ => 1,
        };
        if groups.iter().any(|g| g.len() != arity) {
            return Err(ModelError::Config(format!("{head} head takes {arity} frames per sample")));
        }
        let mut g = Graph::new();
        let mut xs = Vec::with_capacity(arity);
        for k in 0..arity {
            let col: Vec<&[f32]> = groups.iter().map(|grp| grp[k]).collect();
            let t = self.frames_to_tensor(&col)?;
            xs.push(g.input(t));
        }
        let mut r = NoRng;
        let out = match head {
            "triplet" => self.triplet_logits(&mut g, [xs[0], xs[1], xs[2]], Mode::Infer, &mut r)?,
            "pair" => self.pair_logits(&mut g, [xs[0], xs[1]], PairTask::Order, Mode::Infer, &mut r)?,
            "classify" => self.classify_logits(&mut g, xs[0], Mode::Infer, &mut r)?,
            "pose" => self.regress_keypoints(&mut g, xs[0], Mode::Infer, &mut r)?,
            other => return Err(ModelError::NoHead(other.into())),
        };
        let width = g.shape(out)[1];
        Ok(g.value(out).data.chunks(width).map(<[f64]>::to_vec).collect())
    }

    // -- checkpoints ----------------------------------------------------------

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    /// Packs parameters, buffers, optimizer state and a JSON header.
    pub fn to_checkpoint(&self, opt: Option<&OptimState>, extra: serde_json::Value) -> Checkpoint {
        let header = serde_json::json!({
            "backbone": self.config,
            "heads": self.heads,
            "optimizer": opt.map(|o| serde_json::json!({
                "kind": o.kind,
                "momentum": o.momentum,
                "weight_decay": o.weight_decay,
                "eps": o.eps,
            })),
            "extra": extra,
        });
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        if let Some(o) = opt {
            tensors.extend(o.to_tensors());
        }
        Checkpoint {
            config_hash: self.config_hash(),
            header,
            tensors,
        }
    }

    /// Rebuilds a model (and optimizer state, if saved) from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Option<OptimState>)> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let config: BackboneConfig = serde_json::from_value(ckpt.header["backbone"].clone())
            .map_err(|e| bad(format!("backbone header: {e}")))?;
        if config.hash() != ckpt.config_hash {
            return Err(bad(format!(
                "config hash {:016x} does not match header ({:016x})",
                ckpt.config_hash,
                config.hash()
            )));
        }
        let heads: Vec<Head> = serde_json::from_value(ckpt.header["heads"].clone())
            .map_err(|e| bad(format!("heads header: {e}")))?;
        let mut model = Model::new(config, 0)?;
        let mut rng = NoRng;
        for h in heads {
            model.add_head(h, &mut rng);
        }
        model.load_params(ckpt, "")?;
        let opt = match ckpt.header.get("optimizer") {
            Some(v) if !v.is_null() => {
                let kind: OptimKind = serde_json::from_value(v["kind"].clone())
                    .map_err(|e| bad(format!("optimizer header: {e}")))?;
                let mut o = OptimState::new(
                    kind,
                    v["momentum"].as_f64().unwrap_or(0.0),
                    v["weight_decay"].as_f64().unwrap_or(0.0),
                );
                o.eps = v["eps"].as_f64().unwrap_or(o.eps);
                o.load_tensors(&ckpt.tensors);
                Some(o)
            }
            _ => None,
        };
        Ok((model, opt))
    }

    /// Copies every model tensor whose name starts with `prefix` from `ckpt`,
    /// failing with a shape diff on mismatch.
    pub fn load_params(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let have: BTreeMap<&str, &Tensor> =
            ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut diffs = Vec::new();
        for p in self.store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            match have.get(p.name.as_str()) {
                Some(t) if t.shape == p.value.shape => p.value = (*t).clone(),
                Some(t) => diffs.push(format!(
                    "{}: checkpoint {:?} vs model {:?}",
                    p.name, t.shape, p.value.shape
                )),
                None => diffs.push(format!("{}: missing from checkpoint", p.name)),
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Checkpoint(diffs.join("; ")))
        }
    }
}

fn insert_bn(store: &mut ParamStore, prefix: &str, n: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(&[n], 1.0), true);
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[n]), true);
    store.insert(&format!("{prefix}.mean"), Tensor::zeros(&[n]), false);
    store.insert(&format!("{prefix}.var"), Tensor::filled(&[n], 1.0), false);
}

/// Rng for paths that never draw: inference, and heads about to be overwritten.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

/// Contrastive loss of Hadsell et al. on `[N, E]` embeddings with l2 distance.
pub fn drlim_loss(g: &mut Graph, e1: NodeId, e2: NodeId, same: &[bool], margin: f64) -> Result<NodeId> {
    contrastive(g, e1, e2, same, margin, Distance::L2)
}

/// Same hinge with l1 distance.
pub fn tempcoh_loss(g: &mut Graph, e1: NodeId, e2: NodeId, same: &[bool], margin: f64) -> Result<NodeId> {
    contrastive(g, e1, e2, same, margin, Distance::L1)
}

fn contrastive(
    g: &mut Graph,
    e1: NodeId,
    e2: NodeId,
    same: &[bool],
    margin: f64,
    dist: Distance,
) -> Result<NodeId> {
    let diff = g.sub(e1, e2)?;
    let d = match dist {
        Distance::L2 => g.row_l2(diff)?,
        Distance::L1 => g.row_l1(diff)?,
    };
    Ok(g.contrastive(d, same, margin)?)
}

/// `sum_k |p_k - g_k|^2`, averaged over the batch.
pub fn euclidean_loss(g: &mut Graph, pred: NodeId, gt: &Tensor) -> Result<NodeId> {
    let head = g.shape(pred).get(1).copied().unwrap_or(0) / 2;
    let want = gt.shape.get(1).copied().unwrap_or(0) / 2;
    if head != want {
        return Err(ModelError::Keypoints { head, gt: want });
    }
    Ok(g.sq_err(pred, gt)?)
}

/// Ground-truth keypoints as a `[N, 2K]` target, coordinates divided by frame size.
pub fn keypoint_target(sets: &[&KeypointSet], names: &[String], shape: FrameShape) -> Result<Tensor> {
    let mut data = Vec::with_capacity(sets.len() * names.len() * 2);
    for s in sets {
        if s.points.len() != names.len() {
            return Err(ModelError::Keypoints {
                head: names.len(),
                gt: s.points.len(),
            });
        }
        for n in names {
            let p = s.get(n).ok_or_else(|| ModelError::Keypoints {
                head: names.len(),
                gt: s.points.len(),
            })?;
            data.push(p.x / shape.width as f64);
            data.push(p.y / shape.height as f64);
        }
    }
    Ok(Tensor::new(vec![sets.len(), names.len() * 2], data)?)
}

/// Optimizer matching a head: SGD with momentum 0.9 by default.
pub fn default_optimizer(kind: OptimKind, weight_decay: f64) -> OptimState {
    match kind {
        OptimKind::Sgd => OptimState::new(kind, 0.9, weight_decay),
        OptimKind::AdaGrad => OptimState::new(kind, 0.0, weight_decay),
    }
}

#[cfg(test)]
mod tests;
