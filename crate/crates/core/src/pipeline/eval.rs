use std::fmt::Write as _;

use serde::Serialize;

use super::{spaced_indices, FrameSet, PipelineError, Result, Supervision, EVAL_CHUNK};
use crate::corpus::{frame_ssd, Frame, Keypoint, KeypointSet, VideoClip};
use crate::model::{LayerGeom, Mode, Model};
use crate::sampler::TupleSet;
use crate::tensor::{softmax_rows, Graph};

fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::Data(msg.into()))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn tuple_accuracy(logits: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() {
        return data_err("accuracy over an empty set");
    }
    if logits.len() != labels.len() {
        return data_err(format!("{} predictions for {} labels", logits.len(), labels.len()));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, &l)| argmax(z) == l as usize)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Logits of the order head (`triplet` for 3-frame sets, `pair` for 2-frame sets).
pub fn tuple_logits(model: &mut Model, set: &TupleSet) -> Result<Vec<Vec<f64>>> {
    let head = if set.arity == 3 { "triplet" } else { "pair" };
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.records.chunks(EVAL_CHUNK) {
        let groups: Vec<Vec<&[f32]>> = chunk.iter().map(|r| set.record_frames(r)).collect();
        out.extend(model.infer_head(head, &groups)?);
    }
    Ok(out)
}

/// Argmax accuracy of the order head over every record of `set`.
pub fn eval_tuple_accuracy(model: &mut Model, set: &TupleSet) -> Result<f64> {
    if set.is_empty() {
        return data_err("empty heldout tuple set");
    }
    let logits = tuple_logits(model, set)?;
    let labels: Vec<u8> = set.records.iter().map(|r| r.label).collect();
    tuple_accuracy(&logits, &labels)
}

/// Class softmax for each frame buffer.
pub fn class_probabilities(model: &mut Model, frames: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_CHUNK) {
        let groups: Vec<Vec<&[f32]>> = chunk.iter().map(|f| vec![f.as_slice()]).collect();
        for z in model.infer_head("classify", &groups)? {
            out.extend(softmax_rows(&z, z.len()).chunks(z.len()).map(<[f64]>::to_vec));
        }
    }
    Ok(out)
}

pub fn predict_classes(model: &mut Model, frames: &[Vec<f32>]) -> Result<Vec<usize>> {
    Ok(class_probabilities(model, frames)?.iter().map(|p| argmax(p)).collect())
}

/// Argmax of the element-wise mean of probability rows.
pub fn average_argmax(probs: &[Vec<f64>]) -> usize {
    let k = probs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; k];
    for p in probs {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / probs.len() as f64);
    }
    argmax(&mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    pub predictions: Vec<(String, usize, usize)>,
}

/// Clip accuracy from the class softmax averaged over `k` spaced frames per clip.
pub fn eval_classify(model: &mut Model, clips: &[VideoClip], k: usize) -> Result<ClassifyReport> {
    if k == 0 {
        return Err(PipelineError::Config {
            field: "frames_per_clip",
            msg: "must be at least 1".into(),
        });
    }
    if clips.is_empty() {
        return data_err("no clips to classify");
    }
    let mut predictions = Vec::with_capacity(clips.len());
    let mut hits = 0;
    for c in clips {
        let label = c
            .label
            .ok_or_else(|| PipelineError::Data(format!("clip {} has no label", c.id)))?;
        let frames: Vec<Vec<f32>> = spaced_indices(c.len(), k)
            .into_iter()
            .map(|i| c.frames[i].pixels.clone())
            .collect();
        if frames.is_empty() {
            return data_err(format!("clip {} has no frames", c.id));
        }
        let pred = average_argmax(&class_probabilities(model, &frames)?);
        hits += usize::from(pred == label);
        predictions.push((c.id.clone(), label, pred));
    }
    Ok(ClassifyReport {
        accuracy: hits as f64 / clips.len() as f64,
        predictions,
    })
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusItem {
    pub clip_id: String,
    pub frame_index: usize,
}

/// Frames with cached embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddedCorpus {
    pub items: Vec<CorpusItem>,
    pub frames: Vec<Frame>,
    pub embeds: Vec<Vec<f64>>,
}

/// Embeds `frames_per_clip` spaced frames of each clip (all frames when `None`).
pub fn embed_corpus(model: &mut Model, clips: &[VideoClip], frames_per_clip: Option<usize>) -> Result<EmbeddedCorpus> {
    let mut items = Vec::new();
    let mut frames = Vec::new();
    for c in clips {
        let idx = match frames_per_clip {
            Some(k) => spaced_indices(c.len(), k),
            None => (0..c.len()).collect(),
        };
        for i in idx {
            items.push(CorpusItem {
                clip_id: c.id.clone(),
                frame_index: i,
            });
            frames.push(c.frames[i].clone());
        }
    }
    let mut embeds = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_CHUNK) {
        let refs: Vec<&Frame> = chunk.iter().collect();
        embeds.extend(model.embed_frames(&refs)?);
    }
    Ok(EmbeddedCorpus {
        items,
        frames,
        embeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub clip_id: String,
    pub frame_index: usize,
    pub distance: f64,
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `k` nearest corpus frames by embedding distance, skipping the query's own clip and
/// any frame whose pixel SSD to an already returned frame is below `dedup_ssd`.
/// Equal distances keep corpus order.
pub fn nn_retrieve(
    corpus: &EmbeddedCorpus,
    query_embed: &[f64],
    query_clip: &str,
    k: usize,
    dedup_ssd: f64,
) -> Result<Vec<Neighbor>> {
    if corpus.items.is_empty() {
        return data_err("empty retrieval corpus");
    }
    let mut ranked: Vec<(f64, usize)> = corpus
        .embeds
        .iter()
        .enumerate()
        .filter(|(i, _)| corpus.items[*i].clip_id != query_clip)
        .map(|(i, e)| (l2(e, query_embed), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = Vec::new();
    for (_, i) in ranked.iter().copied() {
        if kept.len() == k {
            break;
        }
        let dup = kept.iter().any(|&j| {
            frame_ssd(&corpus.frames[i], &corpus.frames[j]).map_or(false, |s| s < dedup_ssd)
        });
        if !dup {
            kept.push(i);
        }
    }
    Ok(kept
        .into_iter()
        .map(|i| Neighbor {
            clip_id: corpus.items[i].clip_id.clone(),
            frame_index: corpus.items[i].frame_index,
            distance: l2(&corpus.embeds[i], query_embed),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Fill in the blank

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FillResult {
    pub index: usize,
    /// Class-1 probability per candidate.
    pub scores: Vec<f64>,
}

/// Picks the candidate `m` maximising P(ordered | start, m, end).
pub fn fill_blank(model: &mut Model, start: &Frame, end: &Frame, candidates: &[&Frame]) -> Result<FillResult> {
    if candidates.len() < 2 {
        return data_err(format!("need at least 2 candidates, got {}", candidates.len()));
    }
    for (i, c) in candidates.iter().enumerate() {
        if c.shape != start.shape || end.shape != start.shape {
            return data_err(format!(
                "candidate {i} is {}, endpoints are {} and {}",
                c.shape, start.shape, end.shape
            ));
        }
    }
    let groups: Vec<Vec<&[f32]>> = candidates
        .iter()
        .map(|m| vec![start.pixels.as_slice(), m.pixels.as_slice(), end.pixels.as_slice()])
        .collect();
    let logits = model.infer_head("triplet", &groups)?;
    let scores: Vec<f64> = logits.iter().map(|z| softmax_rows(z, 2)[1]).collect();
    Ok(FillResult {
        index: argmax(&scores),
        scores,
    })
}

// ---------------------------------------------------------------------------
// Keypoints

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PckResult {
    pub names: Vec<String>,
    pub per_keypoint: Vec<f64>,
    pub mean: f64,
}

/// A keypoint is correct when `|p - g| <= alpha * ref_length` of its ground-truth set.
pub fn pck(preds: &[KeypointSet], gts: &[KeypointSet], alpha: f64) -> Result<PckResult> {
    if gts.is_empty() {
        return data_err("no ground-truth keypoints");
    }
    if preds.len() != gts.len() {
        return data_err(format!("{} predictions for {} ground-truth frames", preds.len(), gts.len()));
    }
    let names: Vec<String> = gts[0].points.iter().map(|p| p.name.clone()).collect();
    let mut hits = vec![0usize; names.len()];
    for (f, (p, g)) in preds.iter().zip(gts).enumerate() {
        if !(g.ref_length > 0.0 && g.ref_length.is_finite()) {
            return data_err(format!("frame {f}: missing or invalid ref_length {}", g.ref_length));
        }
        for (k, name) in names.iter().enumerate() {
            let gp = g
                .get(name)
                .ok_or_else(|| PipelineError::Data(format!("frame {f}: ground truth lacks '{name}'")))?;
            let pp = p
                .get(name)
                .ok_or_else(|| PipelineError::Data(format!("frame {f}: prediction lacks '{name}'")))?;
            let d = ((pp.x - gp.x).powi(2) + (pp.y - gp.y).powi(2)).sqrt();
            if d <= alpha * g.ref_length {
                hits[k] += 1;
            }
        }
    }
    let per_keypoint: Vec<f64> = hits.iter().map(|&h| h as f64 / gts.len() as f64).collect();
    let mean = per_keypoint.iter().sum::<f64>() / per_keypoint.len().max(1) as f64;
    Ok(PckResult {
        names,
        per_keypoint,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PckCurve {
    pub names: Vec<String>,
    pub alphas: Vec<f64>,
    pub rows: Vec<PckResult>,
}

pub fn pck_curve(preds: &[KeypointSet], gts: &[KeypointSet], alphas: &[f64]) -> Result<PckCurve> {
    let rows = alphas
        .iter()
        .map(|&a| pck(preds, gts, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(PckCurve {
        names: rows.first().map(|r| r.names.clone()).unwrap_or_default(),
        alphas: alphas.to_vec(),
        rows,
    })
}

impl PckCurve {
    /// `alpha,<keypoint>...,mean`, one row per alpha.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha");
        for n in &self.names {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",mean\n");
        for (a, r) in self.alphas.iter().zip(&self.rows) {
            let _ = write!(s, "{a}");
            for v in &r.per_keypoint {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", r.mean);
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let mut series: Vec<super::Series> = self
            .names
            .iter()
            .enumerate()
            .map(|(k, n)| super::Series {
                name: n.clone(),
                points: self.alphas.iter().zip(&self.rows).map(|(&a, r)| (a, r.per_keypoint[k])).collect(),
            })
            .collect();
        series.push(super::Series {
            name: "mean".into(),
            points: self.alphas.iter().zip(&self.rows).map(|(&a, r)| (a, r.mean)).collect(),
        });
        super::line_plot_svg("PCK", "alpha", "PCK", &series)
    }
}

/// Parses `lo:hi:step` (inclusive) or a comma-separated list.
pub fn parse_alpha_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |m: String| PipelineError::Config { field: "alphas", msg: m };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(format!("'{t}': {e}")));
    let parts: Vec<&str> = s.split(':').collect();
    let out: Vec<f64> = match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0) || hi < lo {
                return Err(bad(format!("empty or invalid range {s}")));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            (0..n).map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12).collect()
        }
        [_] => s.split(',').map(num).collect::<Result<_>>()?,
        _ => return Err(bad(format!("expected lo:hi:step or a list, got '{s}'"))),
    };
    if out.is_empty() || out.iter().any(|a| !(*a >= 0.0)) {
        return Err(bad(format!("alphas must be non-negative: '{s}'")));
    }
    Ok(out)
}

/// Keypoint predictions in pixels for each frame buffer.
pub fn predict_keypoints(model: &mut Model, frames: &[Vec<f32>]) -> Result<Vec<KeypointSet>> {
    let names = match model.head("pose") {
        Some(crate::model::Head::Pose { keypoints }) => keypoints.clone(),
        _ => return Err(crate::model::ModelError::NoHead("pose".into()).into()),
    };
    let (w, h) = (model.config.input.width as f64, model.config.input.height as f64);
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_CHUNK) {
        let groups: Vec<Vec<&[f32]>> = chunk.iter().map(|f| vec![f.as_slice()]).collect();
        for row in model.infer_head("pose", &groups)? {
            out.push(KeypointSet {
                points: names
                    .iter()
                    .enumerate()
                    .map(|(k, n)| Keypoint {
                        name: n.clone(),
                        x: row[2 * k] * w,
                        y: row[2 * k + 1] * h,
                        in_frame: true,
                    })
                    .collect(),
                ref_length: 0.0,
            });
        }
    }
    Ok(out)
}

/// Ground-truth sets in pixels, rebuilt from a keypoint frame set.
pub fn frame_set_keypoints(set: &FrameSet) -> Result<Vec<KeypointSet>> {
    let Supervision::Keypoints {
        names,
        targets,
        ref_lengths,
    } = &set.supervision
    else {
        return data_err("frame set has no keypoint supervision");
    };
    let (w, h) = (set.shape.width as f64, set.shape.height as f64);
    Ok(targets
        .iter()
        .zip(ref_lengths)
        .map(|(t, &r)| KeypointSet {
            points: names
                .iter()
                .enumerate()
                .map(|(k, n)| Keypoint {
                    name: n.clone(),
                    x: t[2 * k] * w,
                    y: t[2 * k + 1] * h,
                    in_frame: true,
                })
                .collect(),
            ref_length: r,
        })
        .collect())
}

/// Mean PCK at `alpha` of the pose head over a keypoint frame set.
pub fn eval_pose_pck(model: &mut Model, set: &FrameSet, alpha: f64) -> Result<f64> {
    let gts = frame_set_keypoints(set)?;
    let preds = predict_keypoints(model, &set.frames)?;
    Ok(pck(&preds, &gts, alpha)?.mean)
}

// ---------------------------------------------------------------------------
// Unit visualisation

/// Inclusive input-space box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RfBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

/// Input region seen by output location `(row, col)` of the last layer in `chain`,
/// clipped to a `height x width` input.
pub fn receptive_field(chain: &[LayerGeom], row: usize, col: usize, height: usize, width: usize) -> RfBox {
    let (mut r0, mut r1, mut c0, mut c1) = (row as i64, row as i64, col as i64, col as i64);
    for g in chain.iter().rev() {
        let (s, p, k) = (g.stride as i64, g.pad as i64, g.kernel as i64);
        r0 = r0 * s - p;
        r1 = r1 * s - p + k - 1;
        c0 = c0 * s - p;
        c1 = c1 * s - p + k - 1;
    }
    let clip = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    RfBox {
        top: clip(r0, height),
        left: clip(c0, width),
        bottom: clip(r1, height),
        right: clip(c1, width),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Activation {
    pub clip_id: String,
    pub frame_index: usize,
    pub row: usize,
    pub col: usize,
    pub rf: RfBox,
    pub value: f64,
}

/// Global top-`k` responses of channel `unit` of `layer` over the given frames.
/// Equal values keep frame, then row-major, order.
pub fn top_activations(
    model: &mut Model,
    layer: &str,
    unit: usize,
    frames: &[(String, &Frame)],
    k: usize,
) -> Result<Vec<Activation>> {
    let info = model.config.layer(layer).ok_or_else(|| PipelineError::Config {
        field: "layer",
        msg: format!(
            "unknown layer '{layer}' (have {})",
            model.config.layers().iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
        ),
    })?;
    if unit >= info.channels {
        return Err(PipelineError::Config {
            field: "unit",
            msg: format!("unit {unit} out of range for {layer} with {} channels", info.channels),
        });
    }
    let hw = info.height * info.width;
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (base, chunk) in frames.chunks(EVAL_CHUNK).enumerate().map(|(i, c)| (i * EVAL_CHUNK, c)) {
        let bufs: Vec<&[f32]> = chunk.iter().map(|(_, f)| f.pixels.as_slice()).collect();
        let mut g = Graph::new();
        let x = g.input(model.frames_to_tensor(&bufs)?);
        let (_, named) = model.trace(&mut g, x, Mode::Infer, &mut crate::model::NoRng)?;
        let node = named
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, id)| *id)
            .expect("layer listed by config");
        let v = &g.value(node).data;
        for f in 0..chunk.len() {
            let off = (f * info.channels + unit) * hw;
            for (p, &a) in v[off..off + hw].iter().enumerate() {
                all.push((a, base + f, p));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (ih, iw) = (model.config.input.height, model.config.input.width);
    Ok(all
        .into_iter()
        .take(k)
        .map(|(value, f, p)| {
            let (row, col) = (p / info.width, p % info.width);
            Activation {
                clip_id: frames[f].0.clone(),
                frame_index: frames[f].1.index,
                row,
                col,
                rf: receptive_field(&info.chain, row, col, ih, iw),
                value,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Fill-in-the-blank trials

/// One trial: endpoints `start` and `end` of a clip, the true middle frame hidden among
/// distractors taken from outside the span.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FillTrial {
    pub clip: usize,
    pub start: usize,
    pub end: usize,
    pub candidates: Vec<usize>,
    pub answer: usize,
}

/// Builds `n_trials` trials cycling over `clips`. The span is `2 * gap` frames with the
/// answer at its centre; distractors lie at least `min_sep` frames outside the span.
pub fn fill_trials(
    clips: &[VideoClip],
    n_trials: usize,
    n_candidates: usize,
    gap: usize,
    min_sep: usize,
    seed: u64,
) -> Result<Vec<FillTrial>> {
    use rand::seq::{IndexedRandom, SliceRandom};
    use rand::{Rng, SeedableRng};
    if n_candidates < 2 {
        return Err(PipelineError::Config {
            field: "candidates",
            msg: format!("need at least 2, got {n_candidates}"),
        });
    }
    if gap == 0 {
        return Err(PipelineError::Config {
            field: "gap",
            msg: "must be positive".into(),
        });
    }
    let usable: Vec<usize> = (0..clips.len())
        .filter(|&i| clips[i].len() >= 2 * gap + 1 + 2 * min_sep + n_candidates - 1)
        .collect();
    if usable.is_empty() {
        return data_err(format!(
            "no clip is long enough for span {} with {} distractors {min_sep} frames apart",
            2 * gap,
            n_candidates - 1
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let clip = usable[t % usable.len()];
        let n = clips[clip].len();
        // Resample the span until enough distractor frames remain outside it.
        let (start, pool) = loop {
            let start = rng.random_range(0..n - 2 * gap);
            let end = start + 2 * gap;
            let pool: Vec<usize> = (0..n)
                .filter(|&f| f + min_sep < start || f > end + min_sep)
                .collect();
            if pool.len() >= n_candidates - 1 {
                break (start, pool);
            }
        };
        let mut candidates: Vec<usize> = pool
            .choose_multiple(&mut rng, n_candidates - 1)
            .copied()
            .collect();
        candidates.push(start + gap);
        candidates.shuffle(&mut rng);
        let answer = candidates.iter().position(|&f| f == start + gap).expect("middle frame present");
        trials.push(FillTrial {
            clip,
            start,
            end: start + 2 * gap,
            candidates,
            answer,
        });
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FillReport {
    pub accuracy: f64,
    pub trials: usize,
    /// `(hits, trials)` per clip label name or `unlabelled`.
    pub per_kind: std::collections::BTreeMap<String, (usize, usize)>,
}

/// Runs `trials` through `fill_blank`; `kind_name` maps a clip label to a report key.
pub fn run_fill_trials(
    model: &mut Model,
    clips: &[VideoClip],
    trials: &[FillTrial],
    kind_name: impl Fn(Option<usize>) -> String,
) -> Result<FillReport> {
    if trials.is_empty() {
        return data_err("no fill-in-the-blank trials");
    }
    let mut per_kind = std::collections::BTreeMap::new();
    let mut hits = 0;
    for t in trials {
        let c = &clips[t.clip];
        let cands: Vec<&Frame> = t.candidates.iter().map(|&f| &c.frames[f]).collect();
        let r = fill_blank(model, &c.frames[t.start], &c.frames[t.end], &cands)?;
        let hit = usize::from(r.index == t.answer);
        hits += hit;
        let e = per_kind.entry(kind_name(c.label)).or_insert((0, 0));
        e.0 += hit;
        e.1 += 1;
    }
    Ok(FillReport {
        accuracy: hits as f64 / trials.len() as f64,
        trials: trials.len(),
        per_kind,
    })
}
