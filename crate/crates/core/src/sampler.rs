//! Positive/negative tuple construction and the binary shard format.
//!
//! A draw picks five frames `a < b < c < d < e` from one motion-weighted window.
//! `(b, c, d)` is the positive, `(b, a, d)` and `(b, e, d)` the negatives, and every
//! instance also appears reversed with the same label. All tuples of a draw share the
//! endpoints `{b, d}`, so only the middle frame differs between classes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{frame_ssd_downsampled, mix_seed, str_seed, FrameShape, SynthKind, VideoClip};
use crate::io::*;
use crate::motion::MotionProfile;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("clip of {n} frames is shorter than the {needed} a draw needs")]
    TooShort { n: usize, needed: usize },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("shard format error: {0}")]
    Format(String),
    #[error("shard truncated inside record {record} (last whole record: {})", last_whole.map_or("none".to_string(), |r| r.to_string()))]
    Truncated {
        record: u64,
        last_whole: Option<u64>,
    },
    #[error("frame index {index} out of range for clip {clip}")]
    Index { clip: String, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Largest allowed `|b - d|`.
    pub tau_max: usize,
    /// Smallest allowed `min(|a - b|, |d - e|)`.
    pub tau_min: usize,
    /// A negative is dropped when `ssd(f_c, f_neg) <= ssd_min * ssd(f_b, f_d)`.
    pub ssd_min: f64,
    pub neg_fraction: f64,
    /// Row/column stride used when computing the filter's SSD.
    pub ssd_downsample: usize,
    pub draws_per_clip: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau_max: 60,
            tau_min: 15,
            ssd_min: 0.2,
            neg_fraction: 0.75,
            ssd_downsample: 1,
            draws_per_clip: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SampleError::Config(m.to_string()));
        if self.tau_max < 4 {
            return err("tau_max must be >= 4");
        }
        if self.tau_min < 1 {
            return err("tau_min must be >= 1");
        }
        if !(self.neg_fraction > 0.0 && self.neg_fraction < 1.0) {
            return err("neg_fraction must lie in (0, 1)");
        }
        if !(self.ssd_min >= 0.0) || !self.ssd_min.is_finite() {
            return err("ssd_min must be >= 0");
        }
        Ok(())
    }

    /// Distance between the first and last frame of a sampling window.
    pub fn window_span(&self) -> usize {
        self.tau_max + 2 * self.tau_min
    }

    /// Shortest clip a draw can come from.
    pub fn min_clip_len(&self) -> usize {
        self.window_span() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiveFrameDraw {
    pub clip_id: String,
    /// `[a, b, c, d, e]`, strictly increasing.
    pub indices: [usize; 5],
    /// First frame of the window the draw came from.
    pub window: usize,
}

impl FiveFrameDraw {
    pub fn a(&self) -> usize {
        self.indices[0]
    }
    pub fn b(&self) -> usize {
        self.indices[1]
    }
    pub fn c(&self) -> usize {
        self.indices[2]
    }
    pub fn d(&self) -> usize {
        self.indices[3]
    }
    pub fn e(&self) -> usize {
        self.indices[4]
    }

    /// Checks ordering and the tau constraints.
    pub fn satisfies(&self, cfg: &SamplerConfig) -> bool {
        let [a, b, c, d, e] = self.indices;
        a < b && b < c && c < d && d < e && d - b <= cfg.tau_max && (b - a).min(e - d) >= cfg.tau_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleSample {
    pub clip_id: String,
    pub indices: [usize; 3],
    /// 1 = temporally ordered (either direction), 0 = not.
    pub label: u8,
    pub source: FiveFrameDraw,
    pub inverted: bool,
}

/// Ordering rule: the middle index lies strictly between the outer two.
pub fn order_label(i: usize, j: usize, k: usize) -> u8 {
    u8::from((i < j && j < k) || (k < j && j < i))
}

/// Window start distribution over a clip, proportional to mean window motion.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    cumulative: Vec<f64>,
    span: usize,
}

impl WindowSampler {
    pub fn new(profile: &MotionProfile, cfg: &SamplerConfig) -> Result<Self> {
        let n = profile.len();
        let span = cfg.window_span();
        if n < span + 1 {
            return Err(SampleError::TooShort { n, needed: span + 1 });
        }
        let starts = n - span;
        let mut cumulative = Vec::with_capacity(starts);
        let mut acc = 0.0;
        // running window sum, recomputed from scratch to avoid drift
        for w in 0..starts {
            let m = profile.weights[w..=w + span].iter().sum::<f64>() / (span + 1) as f64;
            acc += m.max(0.0);
            cumulative.push(acc);
        }
        if acc <= 0.0 || !acc.is_finite() {
            // no motion anywhere: uniform over window starts
            cumulative = (1..=starts).map(|i| i as f64).collect();
        }
        Ok(Self { cumulative, span })
    }

    pub fn n_windows(&self) -> usize {
        self.cumulative.len()
    }

    /// Probability of each window start.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = *self.cumulative.last().unwrap();
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = (c - prev) / total;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }

    /// Places five frames inside the window starting at `w0`.
    pub fn place<R: Rng>(&self, w0: usize, cfg: &SamplerConfig, rng: &mut R) -> [usize; 5] {
        let (tmin, tmax) = (cfg.tau_min, cfg.tau_max);
        let last = w0 + self.span;
        let b = rng.random_range(w0 + tmin..=w0 + tmin + tmax - 2);
        let d_hi = (b + tmax).min(last - tmin);
        let d = rng.random_range(b + 2..=d_hi);
        let c = rng.random_range(b + 1..d);
        let a = rng.random_range(w0..=b - tmin);
        let e = rng.random_range(d + tmin..=last);
        [a, b, c, d, e]
    }
}

/// One motion-biased five-frame draw. All-zero profiles fall back to uniform windows.
pub fn draw_five<R: Rng>(
    clip_id: &str,
    profile: &MotionProfile,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<FiveFrameDraw> {
    let ws = WindowSampler::new(profile, cfg)?;
    let w0 = ws.sample(rng);
    Ok(FiveFrameDraw {
        clip_id: clip_id.to_string(),
        indices: ws.place(w0, cfg, rng),
        window: w0,
    })
}

/// Outcome of assembling one draw.
#[derive(Debug, Clone, Default)]
pub struct Assembled {
    pub samples: Vec<TupleSample>,
    pub filtered: usize,
}

/// Positive, two negatives, and the reversal of each survivor.
pub fn assemble_tuples(
    clip: &VideoClip,
    draw: &FiveFrameDraw,
    cfg: &SamplerConfig,
) -> Result<Assembled> {
    let [a, b, c, d, e] = draw.indices;
    if e >= clip.len() {
        return Err(SampleError::Index {
            clip: clip.id.clone(),
            index: e,
        });
    }
    let f = |i: usize| &clip.frames[i];
    let ssd = |x: usize, y: usize| {
        frame_ssd_downsampled(f(x), f(y), cfg.ssd_downsample)
            .map_err(|err| SampleError::Format(err.to_string()))
    };
    let reference = cfg.ssd_min * ssd(b, d)?;

    let mut out = Assembled::default();
    let mut push = |mid: usize, label: u8| {
        for (triple, inverted) in [([b, mid, d], false), ([d, mid, b], true)] {
            out.samples.push(TupleSample {
                clip_id: clip.id.clone(),
                indices: triple,
                label,
                source: draw.clone(),
                inverted,
            });
        }
    };
    push(c, 1);
    let mut filtered = 0;
    for neg in [a, e] {
        if ssd(c, neg)? <= reference {
            filtered += 1;
        } else {
            push(neg, 0);
        }
    }
    out.filtered = filtered;
    Ok(out)
}

/// Pretext tasks that are built from the same five-frame draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum TupleTask {
    /// Three frames; ordered iff the middle lies between the others.
    ThreeOrder,
    /// Two frames; label 1 iff `|i - j| < tau`.
    TwoClose { tau: usize },
    /// Two frames within `tau` of each other; label 1 iff `i < j`.
    TwoOrder { tau: usize },
}

impl TupleTask {
    pub fn arity(&self) -> usize {
        match self {
            TupleTask::ThreeOrder => 3,
            _ => 2,
        }
    }
}

/// Frame pairs for the two-frame tasks, taken from all ten pairs of a draw.
///
/// `TwoClose` emits each pair in both orders with the closeness label;
/// `TwoOrder` keeps pairs closer than `tau` and emits `(i, j)` as 1, `(j, i)` as 0.
pub fn assemble_pairs(draw: &FiveFrameDraw, task: TupleTask) -> Vec<([usize; 2], u8)> {
    let idx = draw.indices;
    let mut out = Vec::new();
    for p in 0..5 {
        for q in p + 1..5 {
            let (i, j) = (idx[p], idx[q]);
            match task {
                TupleTask::TwoClose { tau } => {
                    let label = u8::from(j - i < tau);
                    out.push(([i, j], label));
                    out.push(([j, i], label));
                }
                TupleTask::TwoOrder { tau } => {
                    if j - i < tau {
                        out.push(([i, j], 1));
                        out.push(([j, i], 0));
                    }
                }
                TupleTask::ThreeOrder => {}
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// In-memory tuple sets

/// One training instance: frame ids into the owning set's pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub frames: [u32; 3],
    pub label: u8,
}

/// Labelled tuples over a shared frame pool; `arity` frames per record are used.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleSet {
    pub shape: FrameShape,
    pub arity: usize,
    pub pool: Vec<Vec<f32>>,
    pub records: Vec<Record>,
}

impl TupleSet {
    pub fn new(shape: FrameShape, arity: usize) -> Self {
        Self {
            shape,
            arity,
            pool: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frame(&self, id: u32) -> &[f32] {
        &self.pool[id as usize]
    }

    pub fn record_frames(&self, r: &Record) -> Vec<&[f32]> {
        r.frames[..self.arity].iter().map(|&id| self.frame(id)).collect()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Appends another set with the same shape and arity, remapping its frame ids.
    pub fn extend(&mut self, other: TupleSet) {
        assert_eq!(self.shape, other.shape);
        assert_eq!(self.arity, other.arity);
        let offset = self.pool.len() as u32;
        self.pool.extend(other.pool);
        self.records.extend(other.records.into_iter().map(|mut r| {
            for f in r.frames.iter_mut() {
                *f += offset;
            }
            r
        }));
    }

    /// Keeps at most `per_class` records of each label (in stored order).
    pub fn balanced(&self, per_class: Option<usize>) -> TupleSet {
        let n = per_class.unwrap_or_else(|| self.count_label(0).min(self.count_label(1)));
        let mut taken = [0usize; 2];
        let records = self
            .records
            .iter()
            .filter(|r| {
                let slot = &mut taken[r.label.min(1) as usize];
                *slot += 1;
                *slot <= n
            })
            .copied()
            .collect();
        TupleSet {
            shape: self.shape,
            arity: self.arity,
            pool: self.pool.clone(),
            records,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub clips: usize,
    pub draws: usize,
    pub positives: usize,
    pub negatives: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub clips: usize,
    pub skipped_clips: usize,
    pub draws: usize,
    pub positives: usize,
    pub negatives: usize,
    pub filtered_negatives: usize,
    pub filter_rejection_rate: f64,
    pub per_kind: BTreeMap<String, KindStats>,
}

impl SampleStats {
    fn merge(&mut self, other: &SampleStats) {
        self.clips += other.clips;
        self.skipped_clips += other.skipped_clips;
        self.draws += other.draws;
        self.positives += other.positives;
        self.negatives += other.negatives;
        self.filtered_negatives += other.filtered_negatives;
        for (k, v) in &other.per_kind {
            let e = self.per_kind.entry(k.clone()).or_default();
            e.clips += v.clips;
            e.draws += v.draws;
            e.positives += v.positives;
            e.negatives += v.negatives;
            e.filtered += v.filtered;
        }
    }
}

/// Per-clip rng stream, independent of iteration order or thread scheduling.
pub fn clip_rng(seed: u64, clip_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, str_seed(clip_id)))
}

/// Draws `cfg.draws_per_clip` times from every long-enough clip and assembles `task` instances.
///
/// `profiles[i]` belongs to `clips[i]`. Clips shorter than a window are skipped and counted.
pub fn build_tuple_set(
    clips: &[VideoClip],
    profiles: &[MotionProfile],
    cfg: &SamplerConfig,
    task: TupleTask,
) -> Result<(TupleSet, SampleStats)> {
    cfg.validate()?;
    assert_eq!(clips.len(), profiles.len(), "one profile per clip");
    let shape = clips
        .first()
        .and_then(|c| c.shape())
        .ok_or_else(|| SampleError::Config("no clips to sample from".into()))?;

    let parts = clips
        .par_iter()
        .zip(profiles.par_iter())
        .map(|(clip, profile)| sample_clip(clip, profile, cfg, task))
        .collect::<Result<Vec<_>>>()?;

    let mut set = TupleSet::new(shape, task.arity());
    let mut stats = SampleStats::default();
    for (part, st) in parts {
        if part.shape != shape && !part.is_empty() {
            return Err(SampleError::Format(format!(
                "clip frame shape {} differs from corpus shape {shape}",
                part.shape
            )));
        }
        set.extend(part);
        stats.merge(&st);
    }
    let considered = stats.negatives + stats.filtered_negatives;
    stats.filter_rejection_rate = if considered > 0 {
        stats.filtered_negatives as f64 / considered as f64
    } else {
        0.0
    };
    Ok((set, stats))
}

fn sample_clip(
    clip: &VideoClip,
    profile: &MotionProfile,
    cfg: &SamplerConfig,
    task: TupleTask,
) -> Result<(TupleSet, SampleStats)> {
    let shape = clip.shape().unwrap_or(FrameShape::new(0, 0, 0));
    let kind = clip
        .label
        .and_then(SynthKind::from_label)
        .map_or("unlabelled".to_string(), |k| k.name().to_string());
    let mut stats = SampleStats {
        clips: 1,
        ..Default::default()
    };
    let mut ks = KindStats {
        clips: 1,
        ..Default::default()
    };
    let mut set = TupleSet::new(shape, task.arity());
    let ws = match WindowSampler::new(profile, cfg) {
        Ok(ws) => ws,
        Err(SampleError::TooShort { .. }) => {
            stats.skipped_clips = 1;
            stats.per_kind.insert(kind, ks);
            return Ok((set, stats));
        }
        Err(e) => return Err(e),
    };
    let mut rng = clip_rng(cfg.seed, &clip.id);
    // pool slot per clip frame, allocated lazily
    let mut slot: Vec<Option<u32>> = vec![None; clip.len()];
    let mut id_of = |set: &mut TupleSet, i: usize| -> u32 {
        *slot[i].get_or_insert_with(|| {
            set.pool.push(clip.frames[i].pixels.clone());
            (set.pool.len() - 1) as u32
        })
    };
    for _ in 0..cfg.draws_per_clip {
        let w0 = ws.sample(&mut rng);
        let draw = FiveFrameDraw {
            clip_id: clip.id.clone(),
            indices: ws.place(w0, cfg, &mut rng),
            window: w0,
        };
        ks.draws += 1;
        match task {
            TupleTask::ThreeOrder => {
                let asm = assemble_tuples(clip, &draw, cfg)?;
                ks.filtered += asm.filtered;
                for s in asm.samples {
                    let ids = [
                        id_of(&mut set, s.indices[0]),
                        id_of(&mut set, s.indices[1]),
                        id_of(&mut set, s.indices[2]),
                    ];
                    if s.label == 1 {
                        ks.positives += 1;
                    } else {
                        ks.negatives += 1;
                    }
                    set.records.push(Record {
                        frames: ids,
                        label: s.label,
                    });
                }
            }
            _ => {
                for (pair, label) in assemble_pairs(&draw, task) {
                    let ids = [id_of(&mut set, pair[0]), id_of(&mut set, pair[1]), 0];
                    if label == 1 {
                        ks.positives += 1;
                    } else {
                        ks.negatives += 1;
                    }
                    set.records.push(Record { frames: ids, label });
                }
            }
        }
    }
    stats.draws = ks.draws;
    stats.positives = ks.positives;
    stats.negatives = ks.negatives;
    stats.filtered_negatives = ks.filtered;
    stats.per_kind.insert(kind, ks);
    Ok((set, stats))
}

// ---------------------------------------------------------------------------
// Shard files

const SHARD_MAGIC: &[u8; 4] = b"TUPL";
const SHARD_VERSION: u16 = 1;

/// Writes `TUPL`, version, frame shape (w, h, c as u16), arity u8, record count u64,
/// then per record `arity` frames of f32 followed by a u8 label. Little-endian.
pub fn write_shard(path: &Path, set: &TupleSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SHARD_MAGIC)?;
    put_u16(&mut w, SHARD_VERSION)?;
    for dim in [set.shape.width, set.shape.height, set.shape.channels] {
        let dim = u16::try_from(dim)
            .map_err(|_| SampleError::Format(format!("frame dimension {dim} exceeds u16")))?;
        put_u16(&mut w, dim)?;
    }
    put_u8(&mut w, set.arity as u8)?;
    put_u64(&mut w, set.records.len() as u64)?;
    for r in &set.records {
        for f in set.record_frames(r) {
            put_f32s(&mut w, f)?;
        }
        put_u8(&mut w, r.label)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardRecord {
    pub frames: Vec<Vec<f32>>,
    pub label: u8,
}

/// Streaming reader over a shard file.
pub struct ShardReader<R> {
    inner: R,
    pub shape: FrameShape,
    pub arity: usize,
    pub count: u64,
    next: u64,
    failed: bool,
}

impl ShardReader<BufReader<fs::File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(fs::File::open(path)?))
    }
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let header = |e: std::io::Error| {
            if is_eof(&e) {
                SampleError::Format("truncated header".into())
            } else {
                SampleError::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic).map_err(header)?;
        if &magic != SHARD_MAGIC {
            return Err(SampleError::Format(format!("bad magic {magic:?}")));
        }
        let version = get_u16(&mut inner).map_err(header)?;
        if version != SHARD_VERSION {
            return Err(SampleError::Format(format!("unsupported version {version}")));
        }
        let w = get_u16(&mut inner).map_err(header)? as usize;
        let h = get_u16(&mut inner).map_err(header)? as usize;
        let c = get_u16(&mut inner).map_err(header)? as usize;
        let arity = get_u8(&mut inner).map_err(header)? as usize;
        if !(2..=3).contains(&arity) {
            return Err(SampleError::Format(format!("arity {arity}")));
        }
        let count = get_u64(&mut inner).map_err(header)?;
        Ok(Self {
            inner,
            shape: FrameShape::new(w, h, c),
            arity,
            count,
            next: 0,
            failed: false,
        })
    }

    fn read_record(&mut self) -> Result<ShardRecord> {
        let idx = self.next;
        let trunc = |e: std::io::Error| {
            if is_eof(&e) {
                SampleError::Truncated {
                    record: idx,
                    last_whole: idx.checked_sub(1),
                }
            } else {
                SampleError::Io(e)
            }
        };
        let mut frames = Vec::with_capacity(self.arity);
        for _ in 0..self.arity {
            frames.push(get_f32s(&mut self.inner, self.shape.len()).map_err(trunc)?);
        }
        let label = get_u8(&mut self.inner).map_err(trunc)?;
        Ok(ShardRecord { frames, label })
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<ShardRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.count {
            return None;
        }
        let r = self.read_record();
        if r.is_err() {
            self.failed = true;
        }
        self.next += 1;
        Some(r)
    }
}

pub fn read_shard(path: &Path) -> Result<ShardReader<BufReader<fs::File>>> {
    ShardReader::open(path)
}

/// Reads a whole shard into memory.
pub fn load_shard(path: &Path) -> Result<TupleSet> {
    let reader = read_shard(path)?;
    let mut set = TupleSet::new(reader.shape, reader.arity);
    for rec in reader {
        let rec = rec?;
        let mut ids = [0u32; 3];
        for (slot, f) in ids.iter_mut().zip(rec.frames) {
            set.pool.push(f);
            *slot = (set.pool.len() - 1) as u32;
        }
        set.records.push(Record {
            frames: ids,
            label: rec.label,
        });
    }
    Ok(set)
}
