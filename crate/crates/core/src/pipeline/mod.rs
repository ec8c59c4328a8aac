//! Batching, training loops and evaluation.

mod eval;
mod plot;

pub use eval::*;
pub use plot::{line_plot_svg, Series};

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FrameShape, VideoClip};
use crate::model::{
    default_optimizer, drlim_loss, euclidean_loss, keypoint_target, tempcoh_loss, BackboneConfig,
    Head, Mode, Model, ModelError, PairTask,
};
use crate::sampler::{TupleSet, TupleTask};
use crate::tensor::{Graph, NodeId, OptimKind, OptimState, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("invalid config field '{field}': {msg}")]
    Config { field: &'static str, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("loss became non-finite at iteration {iteration}; last good model kept")]
    Diverged {
        iteration: usize,
        last_good: Box<TrainOutcome>,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn cfg_err<T>(field: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::Config {
        field,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ThreeOrder,
    TwoClose,
    TwoOrder,
    Drlim,
    Tempcoh,
    Classify,
    Pose,
}

impl Task {
    pub const PRETEXT: [Task; 5] = [
        Task::ThreeOrder,
        Task::TwoClose,
        Task::TwoOrder,
        Task::Drlim,
        Task::Tempcoh,
    ];

    pub fn is_pretext(self) -> bool {
        Self::PRETEXT.contains(&self)
    }

    /// Sampler task producing this task's training records.
    pub fn tuple_task(self, close_tau: usize) -> Option<TupleTask> {
        match self {
            Task::ThreeOrder => Some(TupleTask::ThreeOrder),
            Task::TwoClose | Task::Drlim | Task::Tempcoh => Some(TupleTask::TwoClose { tau: close_tau }),
            Task::TwoOrder => Some(TupleTask::TwoOrder { tau: close_tau }),
            Task::Classify | Task::Pose => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::ThreeOrder => "three_order",
            Task::TwoClose => "two_close",
            Task::TwoOrder => "two_order",
            Task::Drlim => "drlim",
            Task::Tempcoh => "tempcoh",
            Task::Classify => "classify",
            Task::Pose => "pose",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            Task::ThreeOrder,
            Task::TwoClose,
            Task::TwoOrder,
            Task::Drlim,
            Task::Tempcoh,
            Task::Classify,
            Task::Pose,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| format!("unknown task '{s}'"))
    }
}

/// `base * decay^k` where `k` counts the entries of `steps` already reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub steps: Vec<usize>,
}

impl LrSchedule {
    pub fn fixed(base: f64) -> Self {
        Self {
            base,
            decay: 1.0,
            steps: Vec::new(),
        }
    }

    pub fn at(&self, iteration: usize) -> f64 {
        let k = self.steps.iter().filter(|&&s| iteration >= s).count();
        self.base * self.decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub iterations: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimKind,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of label-0 records per batch (tuple and pair tasks).
    pub neg_fraction: f64,
    /// 0 disables periodic evaluation; a final evaluation always runs.
    pub eval_every: usize,
    pub seed: u64,
    /// Contrastive margin for DrLim and TempCoh.
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::ThreeOrder,
            iterations: 3000,
            lr: LrSchedule::fixed(1e-3),
            optimizer: OptimKind::Sgd,
            weight_decay: 5e-4,
            batch_size: 64,
            neg_fraction: 0.75,
            eval_every: 500,
            seed: 0,
            margin: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn finetune_default(task: Task) -> Self {
        Self {
            task,
            iterations: 1000,
            neg_fraction: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return cfg_err("batch_size", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.neg_fraction) {
            return cfg_err("neg_fraction", format!("{} outside [0, 1]", self.neg_fraction));
        }
        if !(self.lr.base > 0.0 && self.lr.base.is_finite()) {
            return cfg_err("lr.base", format!("{} must be positive", self.lr.base));
        }
        if self.lr.steps.windows(2).any(|w| w[0] >= w[1]) {
            return cfg_err("lr.steps", "decay steps must be strictly increasing");
        }
        if !(self.weight_decay >= 0.0) {
            return cfg_err("weight_decay", "must be non-negative");
        }
        if !(self.margin > 0.0) {
            return cfg_err("margin", "must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batching

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub neg_fraction: f64,
    pub seed: u64,
}

impl BatchSpec {
    pub fn negatives(&self) -> usize {
        (self.neg_fraction * self.batch_size as f64).round() as usize
    }
}

/// Epoch-wise sampling without replacement from one index pool.
#[derive(Debug, Clone)]
struct EpochPool {
    items: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epochs: usize,
}

impl EpochPool {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut order = items.clone();
        order.shuffle(rng);
        Self {
            items,
            order,
            cursor: 0,
            epochs: 0,
        }
    }

    /// Takes `n` items. When the epoch runs out mid-batch, a fresh permutation is started
    /// with the items already in this batch moved to its end. Repeats within a batch
    /// happen only when the pool is smaller than `n`.
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        let start = out.len();
        let mut taken = HashSet::new();
        while out.len() - start < n {
            if self.cursor == self.order.len() {
                let mut order = self.items.clone();
                order.shuffle(rng);
                let (fresh, seen): (Vec<usize>, Vec<usize>) =
                    order.into_iter().partition(|i| !taken.contains(i));
                self.order = fresh.into_iter().chain(seen).collect();
                self.cursor = 0;
                self.epochs += 1;
            }
            let item = self.order[self.cursor];
            self.cursor += 1;
            if taken.insert(item) || taken.len() >= self.items.len() {
                out.push(item);
            }
        }
    }
}

/// Class-balanced mini-batches over a labelled record set.
#[derive(Debug, Clone)]
pub struct Batcher {
    spec: BatchSpec,
    neg: Option<EpochPool>,
    pos: Option<EpochPool>,
    rng: ChaCha8Rng,
    warned: bool,
}

impl Batcher {
    /// `labels[i]` is the label of record `i` (0 negative, anything else positive).
    pub fn new(spec: BatchSpec, labels: &[u8]) -> Result<Self> {
        if spec.batch_size == 0 {
            return cfg_err("batch_size", "must be positive");
        }
        if !(0.0..=1.0).contains(&spec.neg_fraction) {
            return cfg_err("neg_fraction", format!("{} outside [0, 1]", spec.neg_fraction));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (neg, pos): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == 0);
        let n_neg = spec.negatives();
        if n_neg > 0 && neg.is_empty() {
            return Err(PipelineError::Data("no negative records to fill batches".into()));
        }
        if spec.batch_size > n_neg && pos.is_empty() {
            return Err(PipelineError::Data("no positive records to fill batches".into()));
        }
        let neg = (!neg.is_empty()).then(|| EpochPool::new(neg, &mut rng));
        let pos = (!pos.is_empty()).then(|| EpochPool::new(pos, &mut rng));
        Ok(Self {
            spec,
            neg,
            pos,
            rng,
            warned: false,
        })
    }

    /// Record indices, negatives first then positives, each group in draw order.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let n_neg = self.spec.negatives();
        let n_pos = self.spec.batch_size - n_neg;
        let mut out = Vec::with_capacity(self.spec.batch_size);
        let before = self.epochs();
        if let Some(p) = self.neg.as_mut() {
            p.take(n_neg, &mut self.rng, &mut out);
        }
        if let Some(p) = self.pos.as_mut() {
            p.take(n_pos, &mut self.rng, &mut out);
        }
        if self.epochs() > before && !self.warned {
            log::warn!("a class pool was exhausted mid-epoch; reshuffled it");
            self.warned = true;
        }
        out
    }

    fn epochs(&self) -> usize {
        self.neg.as_ref().map_or(0, |p| p.epochs) + self.pos.as_ref().map_or(0, |p| p.epochs)
    }

    /// Whether the exhaustion warning has fired.
    pub fn warned(&self) -> bool {
        self.warned
    }
}

/// `make_batch` for a tuple set: record indices with exact class counts.
pub fn make_batch(batcher: &mut Batcher) -> Vec<usize> {
    batcher.next_batch()
}

// ---------------------------------------------------------------------------
// Labelled frames for the downstream tasks

#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    Classes { labels: Vec<usize>, classes: usize },
    /// Rows of normalised `(x, y)` pairs in `names` order, plus each frame's PCK
    /// reference length in pixels.
    Keypoints {
        names: Vec<String>,
        targets: Vec<Vec<f64>>,
        ref_lengths: Vec<f64>,
    },
}

/// Single frames with per-frame supervision, for finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub shape: FrameShape,
    pub frames: Vec<Vec<f32>>,
    pub clip_ids: Vec<String>,
    pub supervision: Supervision,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `k` uniformly spaced frame indices of an `n`-frame clip (all frames when `n <= k`).
pub fn spaced_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|i| ((2 * i + 1) * n) / (2 * k)).collect()
}

fn clip_shape(clips: &[VideoClip]) -> Result<FrameShape> {
    clips
        .iter()
        .find_map(|c| c.shape())
        .ok_or_else(|| PipelineError::Data("no frames in clip set".into()))
}

/// `frames_per_clip` spaced frames from each labelled clip.
pub fn classify_frames(clips: &[VideoClip], frames_per_clip: usize, classes: usize) -> Result<FrameSet> {
    let shape = clip_shape(clips)?;
    let (mut frames, mut ids, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for c in clips {
        let label = c
            .label
            .ok_or_else(|| PipelineError::Data(format!("clip {} has no label", c.id)))?;
        if label >= classes {
            return Err(PipelineError::Data(format!(
                "clip {} label {label} outside {classes} classes",
                c.id
            )));
        }
        for i in spaced_indices(c.len(), frames_per_clip) {
            frames.push(c.frames[i].pixels.clone());
            ids.push(c.id.clone());
            labels.push(label);
        }
    }
    Ok(FrameSet {
        shape,
        frames,
        clip_ids: ids,
        supervision: Supervision::Classes { labels, classes },
    })
}

/// `frames_per_clip` spaced frames from each clip with keypoints, using the first
/// clip's keypoint names.
pub fn pose_frames(clips: &[VideoClip], frames_per_clip: usize) -> Result<FrameSet> {
    let shape = clip_shape(clips)?;
    let names: Vec<String> = clips
        .iter()
        .find_map(|c| c.keypoints.as_ref().and_then(|k| k.first()))
        .ok_or_else(|| PipelineError::Data("no clip carries keypoints".into()))?
        .points
        .iter()
        .map(|p| p.name.clone())
        .collect();
    let (mut frames, mut ids, mut targets, mut refs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in clips {
        let kps = c
            .keypoints
            .as_ref()
            .ok_or_else(|| PipelineError::Data(format!("clip {} has no keypoints", c.id)))?;
        for i in spaced_indices(c.len(), frames_per_clip) {
            let t = keypoint_target(&[&kps[i]], &names, shape)?;
            frames.push(c.frames[i].pixels.clone());
            ids.push(c.id.clone());
            targets.push(t.data);
            refs.push(kps[i].ref_length);
        }
    }
    Ok(FrameSet {
        shape,
        frames,
        clip_ids: ids,
        supervision: Supervision::Keypoints {
            names,
            targets,
            ref_lengths: refs,
        },
    })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub metric: Option<f64>,
}

/// Loss and heldout metric at each evaluation point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub metric_name: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.iteration < row.iteration));
        self.rows.push(row);
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.metric)
    }

    pub fn to_csv(&self) -> String {
        let name = if self.metric_name.is_empty() { "metric" } else { &self.metric_name };
        let mut s = format!("iteration,loss,{name}\n");
        for r in &self.rows {
            let m = r.metric.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.iteration, r.loss, m);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimState,
    pub log: MetricsLog,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> crate::tensor::Checkpoint {
        self.model.to_checkpoint(
            Some(&self.optimizer),
            serde_json::json!({ "train": cfg }),
        )
    }
}

/// Per-channel mean over a set of interleaved frames.
pub fn channel_mean<'a>(frames: impl IntoIterator<Item = &'a [f32]>, channels: usize) -> Vec<f64> {
    let mut sum = vec![0.0; channels];
    let mut count = 0usize;
    for f in frames {
        for px in f.chunks_exact(channels) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        count += f.len() / channels;
    }
    sum.into_iter().map(|s| s / count.max(1) as f64).collect()
}

fn check_shape(cfg: &BackboneConfig, shape: FrameShape) -> Result<()> {
    if cfg.input != shape {
        return Err(PipelineError::Data(format!(
            "data frames are {shape}, backbone expects {}",
            cfg.input
        )));
    }
    Ok(())
}

fn buffers(model: &Model) -> Vec<(String, Vec<f64>)> {
    model
        .store
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), p.value.data.clone()))
        .collect()
}

fn restore_buffers(model: &mut Model, saved: Vec<(String, Vec<f64>)>) {
    for (name, data) in saved {
        if let Some(p) = model.store.by_name_mut(&name) {
            p.value.data = data;
        }
    }
}

/// Shared loop: `step` builds the loss graph for one batch and returns its loss node.
fn run_loop<F, E>(
    mut model: Model,
    cfg: &TrainConfig,
    mut step: F,
    mut evaluate: E,
    metric_name: &str,
    warnings: Vec<String>,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut Model, &mut Graph, &mut ChaCha8Rng) -> Result<NodeId>,
    E: FnMut(&mut Model) -> Result<Option<f64>>,
{
    let mut opt = default_optimizer(cfg.optimizer, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(cfg.seed, 0x7472_6169_6e));
    let mut log = MetricsLog {
        metric_name: metric_name.to_string(),
        rows: Vec::new(),
    };
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for it in 0..cfg.iterations {
        let saved = buffers(&model);
        let mut g = Graph::new();
        let loss = step(&mut model, &mut g, &mut rng)?;
        let value = g.value(loss).data[0];
        if !value.is_finite() {
            restore_buffers(&mut model, saved);
            return Err(PipelineError::Diverged {
                iteration: it,
                last_good: Box::new(TrainOutcome {
                    model,
                    optimizer: opt,
                    log,
                    warnings,
                }),
            });
        }
        g.backward(loss)?;
        g.write_param_grads(&mut model.store);
        opt.step(&mut model.store, cfg.lr.at(it))?;
        loss_sum += value;
        loss_n += 1;
        let done = it + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.iterations {
            let metric = evaluate(&mut model)?;
            log.push(MetricsRow {
                iteration: done,
                loss: loss_sum / loss_n as f64,
                metric,
            });
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    let metric = evaluate(&mut model)?;
    log.push(MetricsRow {
        iteration: cfg.iterations,
        loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
        metric,
    });
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
        warnings,
    })
}

/// Stacks column `k` of the chosen records into a `[B, C, H, W]` input node.
fn tuple_inputs(model: &Model, g: &mut Graph, set: &TupleSet, batch: &[usize]) -> Result<Vec<NodeId>> {
    (0..set.arity)
        .map(|k| {
            let col: Vec<&[f32]> = batch
                .iter()
                .map(|&i| set.frame(set.records[i].frames[k]))
                .collect();
            Ok(g.input(model.frames_to_tensor(&col)?))
        })
        .collect()
}

/// Trains a pretext task from scratch on `train`; `heldout` feeds the logged metric.
///
/// Order and pair tasks log heldout accuracy; the contrastive tasks log heldout loss.
pub fn pretrain(
    backbone: BackboneConfig,
    cfg: &TrainConfig,
    train: &TupleSet,
    heldout: Option<&TupleSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.task.is_pretext() {
        return cfg_err("task", format!("{} is not a pretext task", cfg.task.name()));
    }
    let want_arity = if cfg.task == Task::ThreeOrder { 3 } else { 2 };
    if train.arity != want_arity {
        return Err(PipelineError::Data(format!(
            "{} needs {want_arity}-frame records, shard holds {}-frame records",
            cfg.task.name(),
            train.arity
        )));
    }
    if train.is_empty() {
        return Err(PipelineError::Data("empty training set".into()));
    }
    check_shape(&backbone, train.shape)?;
    let mut backbone = backbone;
    if backbone.mean_subtract {
        backbone.input_mean = channel_mean(train.pool.iter().map(Vec::as_slice), backbone.input.channels);
    }
    let mut model = Model::new(backbone, cfg.seed)?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(cfg.seed, 0x6865_6164));
    match cfg.task {
        Task::ThreeOrder => model.add_head(Head::Triplet, &mut head_rng),
        Task::TwoClose | Task::TwoOrder => model.add_head(Head::Pair, &mut head_rng),
        _ => {}
    }
    let labels: Vec<u8> = train.records.iter().map(|r| r.label).collect();
    let mut batcher = Batcher::new(
        BatchSpec {
            batch_size: cfg.batch_size,
            neg_fraction: cfg.neg_fraction,
            seed: cfg.seed,
        },
        &labels,
    )?;
    let task = cfg.task;
    let margin = cfg.margin;
    let step = |model: &mut Model, g: &mut Graph, rng: &mut ChaCha8Rng| -> Result<NodeId> {
        let batch = batcher.next_batch();
        let xs = tuple_inputs(model, g, train, &batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| train.records[i].label as usize).collect();
        pretext_loss(model, g, task, &xs, &labels, margin, Mode::Train, rng)
    };
    let metric_name = match task {
        Task::Drlim | Task::Tempcoh => "heldout_loss",
        _ => "heldout_accuracy",
    };
    let evaluate = |model: &mut Model| -> Result<Option<f64>> {
        match heldout {
            None => Ok(None),
            Some(h) if h.is_empty() => Ok(None),
            Some(h) => match task {
                Task::Drlim | Task::Tempcoh => Ok(Some(eval_pretext_loss(model, h, task, margin)?)),
                _ => Ok(Some(eval_tuple_accuracy(model, h)?)),
            },
        }
    };
    run_loop(model, cfg, step, evaluate, metric_name, Vec::new())
}

#[allow(clippy::too_many_arguments)]
fn pretext_loss(
    model: &mut Model,
    g: &mut Graph,
    task: Task,
    xs: &[NodeId],
    labels: &[usize],
    margin: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    Ok(match task {
        Task::ThreeOrder => {
            let y = model.triplet_logits(g, [xs[0], xs[1], xs[2]], mode, rng)?;
            g.softmax_xent(y, labels)?
        }
        Task::TwoClose | Task::TwoOrder => {
            let pt = if task == Task::TwoClose { PairTask::Close } else { PairTask::Order };
            let y = model.pair_logits(g, [xs[0], xs[1]], pt, mode, rng)?;
            g.softmax_xent(y, labels)?
        }
        Task::Drlim | Task::Tempcoh => {
            let e1 = model.embed_batch(g, xs[0], mode, rng)?;
            let e2 = model.embed_batch(g, xs[1], mode, rng)?;
            let same: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            if task == Task::Drlim {
                drlim_loss(g, e1, e2, &same, margin)?
            } else {
                tempcoh_loss(g, e1, e2, &same, margin)?
            }
        }
        Task::Classify | Task::Pose => unreachable!("not a pretext task"),
    })
}

/// Mean contrastive loss over a pair set in inference mode.
pub fn eval_pretext_loss(model: &mut Model, set: &TupleSet, task: Task, margin: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(PipelineError::Data("empty evaluation set".into()));
    }
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let xs = tuple_inputs(model, &mut g, set, chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.records[i].label as usize).collect();
        let l = pretext_loss(model, &mut g, task, &xs, &labels, margin, Mode::Infer, &mut rng)?;
        total += g.value(l).data[0] * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

pub(crate) const EVAL_CHUNK: usize = 256;

/// Trains a downstream head on `train`, starting from `init` (its heads are dropped)
/// or from a fresh random backbone.
pub fn finetune(
    init: Option<&Model>,
    backbone: BackboneConfig,
    cfg: &TrainConfig,
    train: &FrameSet,
    heldout: Option<&FrameSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Data("empty training set".into()));
    }
    let mut warnings = Vec::new();
    let mut model = match init {
        Some(m) => {
            if m.config.input != train.shape {
                return Err(PipelineError::Model(ModelError::Checkpoint(format!(
                    "checkpoint input {} vs data frames {}",
                    m.config.input, train.shape
                ))));
            }
            let mut m = m.clone();
            m.strip_heads();
            m
        }
        None => {
            check_shape(&backbone, train.shape)?;
            let mut b = backbone;
            if b.mean_subtract {
                b.input_mean = channel_mean(train.frames.iter().map(Vec::as_slice), b.input.channels);
            }
            Model::new(b, cfg.seed)?
        }
    };
    let mut head_rng = ChaCha8Rng::seed_from_u64(crate::corpus::mix_seed(cfg.seed, 0x6865_6164));
    match (&train.supervision, cfg.task) {
        (Supervision::Classes { labels, classes }, Task::Classify) => {
            let distinct: HashSet<usize> = labels.iter().copied().collect();
            if distinct.len() < 2 {
                let w = format!(
                    "training data has a single class ({}); accuracy is trivially 1.0",
                    distinct.len()
                );
                log::warn!("{w}");
                warnings.push(w);
            }
            model.add_head(Head::Classify { classes: *classes }, &mut head_rng);
        }
        (Supervision::Keypoints { names, .. }, Task::Pose) => {
            model.add_head(Head::Pose { keypoints: names.clone() }, &mut head_rng);
        }
        _ => {
            return cfg_err(
                "task",
                format!("{} does not match the supervision in the frame set", cfg.task.name()),
            )
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size;
    let step = |model: &mut Model, g: &mut Graph, rng: &mut ChaCha8Rng| -> Result<NodeId> {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let frames: Vec<&[f32]> = batch.iter().map(|&i| train.frames[i].as_slice()).collect();
        let x = g.input(model.frames_to_tensor(&frames)?);
        downstream_loss(model, g, train, &batch, x, Mode::Train, rng)
    };
    let metric_name = match cfg.task {
        Task::Classify => "heldout_accuracy",
        _ => "heldout_pck@0.2",
    };
    let evaluate = |model: &mut Model| -> Result<Option<f64>> {
        let Some(h) = heldout.filter(|h| !h.is_empty()) else {
            return Ok(None);
        };
        Ok(Some(match &h.supervision {
            Supervision::Classes { labels, .. } => {
                let preds = predict_classes(model, &h.frames)?;
                preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
            }
            Supervision::Keypoints { .. } => eval_pose_pck(model, h, 0.2)?,
        }))
    };
    run_loop(model, cfg, step, evaluate, metric_name, warnings)
}

fn downstream_loss(
    model: &mut Model,
    g: &mut Graph,
    set: &FrameSet,
    batch: &[usize],
    x: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    match &set.supervision {
        Supervision::Classes { labels, .. } => {
            let y = model.classify_logits(g, x, mode, rng)?;
            let l: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            Ok(g.softmax_xent(y, &l)?)
        }
        Supervision::Keypoints { targets, .. } => {
            let y = model.regress_keypoints(g, x, mode, rng)?;
            let width = targets.first().map_or(0, Vec::len);
            let data: Vec<f64> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let t = Tensor::new(vec![batch.len(), width], data)?;
            Ok(euclidean_loss(g, y, &t)?)
        }
    }
}
