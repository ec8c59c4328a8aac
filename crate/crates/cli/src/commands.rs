use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use order_verify::corpus::{gen_corpus, load_manifest_clips, CorpusSpec, Frame, SynthKind, VideoClip};
use order_verify::model::{BackboneConfig, Model};
use order_verify::motion::{motion_profile, FlowConfig};
use order_verify::pipeline::{
    classify_frames, embed_corpus, eval_classify, eval_pose_pck, eval_pretext_loss, eval_tuple_accuracy,
    fill_trials, finetune, frame_set_keypoints, line_plot_svg, nn_retrieve, parse_alpha_grid, pck_curve,
    pose_frames, predict_keypoints, pretrain, run_fill_trials, top_activations, LrSchedule, PipelineError,
    Series, Task, TrainConfig, TrainOutcome,
};
use order_verify::sampler::{build_tuple_set, load_shard, write_shard, SamplerConfig};
use order_verify::tensor::{read_checkpoint, write_checkpoint, Checkpoint};

use crate::config::RunConfig;
use crate::{Cli, CliError, Command, SplitArg, TrainFlags};

type Result<T> = std::result::Result<T, CliError>;

/// Shard paths for pretraining.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct DataConfig {
    shard: Option<PathBuf>,
    heldout: Option<PathBuf>,
}

/// Evaluation settings shared by the evaluation subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalConfig {
    frames_per_clip: usize,
    classes: Option<usize>,
    alpha: f64,
    alphas: String,
    trials: usize,
    candidates: usize,
    gap: usize,
    min_sep: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frames_per_clip: 5,
            classes: None,
            alpha: 0.2,
            alphas: "0.05:0.5:0.05".into(),
            trials: 200,
            candidates: 5,
            gap: 3,
            min_sep: 3,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.set_root("seed", cli.common.seed);
    let seed = cfg.root_u64("seed", 0)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let flag_seed = cli.common.seed;
    match cli.command {
        Command::Gen {
            kinds,
            n,
            frames,
            size,
            noise,
        } => {
            let mix = parse_mix(&kinds)?;
            cfg.set("corpus", "n_clips", n);
            cfg.set("corpus", "n_frames", frames);
            cfg.set("corpus", "size", size);
            cfg.set("corpus", "noise_std", noise);
            cfg.set("corpus", "mix", mix);
            cfg.set("corpus", "seed", flag_seed);
            let spec: CorpusSpec = cfg.resolve(
                "corpus",
                CorpusSpec {
                    n_clips: 100,
                    mix: SynthKind::ALL.iter().map(|&k| (k, 0.25)).collect(),
                    n_frames: 24,
                    size: 32,
                    noise_std: 0.02,
                    seed,
                },
            )?;
            cfg.write(&out)?;
            let entries = gen_corpus(&spec, &out)?;
            println!(
                "{}",
                json!({ "clips": entries.len(), "manifest": out.join("manifest.jsonl") })
            );
        }
        Command::Sample {
            manifest,
            split,
            task,
            tau_max,
            tau_min,
            ssd_min,
            neg_fraction,
            draws_per_clip,
            close_tau,
        } => {
            cfg.set("sampler", "tau_max", tau_max);
            cfg.set("sampler", "tau_min", tau_min);
            cfg.set("sampler", "ssd_min", ssd_min);
            cfg.set("sampler", "neg_fraction", neg_fraction);
            cfg.set("sampler", "draws_per_clip", draws_per_clip);
            cfg.set("sampler", "seed", flag_seed);
            let sampler: SamplerConfig = cfg.resolve(
                "sampler",
                SamplerConfig {
                    seed,
                    ..SamplerConfig::default()
                },
            )?;
            let flow: FlowConfig = cfg.resolve("flow", FlowConfig::default())?;
            let task = parse_task(&task)?;
            let close_tau = close_tau.unwrap_or(sampler.tau_max);
            let tuple_task = task
                .tuple_task(close_tau)
                .ok_or_else(|| CliError::invalid("task", format!("{} has no tuple shard", task.name())))?;
            cfg.set_root("task", Some(task));
            cfg.set_root("close_tau", Some(close_tau));
            cfg.write(&out)?;
            let clips = load_clips(&manifest, split)?;
            let profiles = clips
                .iter()
                .map(|c| motion_profile(c, &flow).map_err(|e| anyhow!("clip {}: {e}", c.id)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let (set, stats) = build_tuple_set(&clips, &profiles, &sampler, tuple_task)?;
            let name = format!("{}.shard", split_name(split));
            write_shard(&out.join(&name), &set)?;
            write_json(&out.join("stats.json"), &stats)?;
            println!("{}", json!({ "shard": out.join(name), "records": set.len(), "stats": stats }));
        }
        Command::Pretrain {
            task,
            shard,
            heldout,
            neg_fraction,
            train,
        } => {
            let task = parse_task(&task)?;
            if !task.is_pretext() {
                return Err(CliError::invalid("task", format!("{} is not a pretext task", task.name())));
            }
            cfg.set("train", "task", Some(task));
            cfg.set("train", "neg_fraction", neg_fraction);
            apply_train_flags(&mut cfg, &train, flag_seed);
            let train_cfg: TrainConfig = cfg.resolve(
                "train",
                TrainConfig {
                    task,
                    seed,
                    ..TrainConfig::default()
                },
            )?;
            cfg.set("data", "shard", shard.as_ref().map(|p| p.display().to_string()));
            cfg.set("data", "heldout", heldout.as_ref().map(|p| p.display().to_string()));
            let data: DataConfig = cfg.resolve("data", DataConfig::default())?;
            let shard = data
                .shard
                .ok_or_else(|| CliError::invalid("shard", "give --shard or data.shard in the config"))?;
            let set = load_shard(&shard)?;
            let held = data.heldout.as_deref().map(load_shard).transpose()?;
            let backbone: BackboneConfig = cfg.resolve(
                "backbone",
                BackboneConfig {
                    input: set.shape,
                    ..BackboneConfig::default()
                },
            )?;
            cfg.write(&out)?;
            let outcome = pretrain(backbone, &train_cfg, &set, held.as_ref());
            finish_training(outcome, &train_cfg, &out)?;
        }
        Command::Finetune {
            task,
            manifest,
            init,
            frames_per_clip,
            clips_per_class,
            train,
        } => {
            let task = parse_task(&task)?;
            if !matches!(task, Task::Classify | Task::Pose) {
                return Err(CliError::invalid("task", "finetune takes classify or pose"));
            }
            cfg.set("train", "task", Some(task));
            apply_train_flags(&mut cfg, &train, flag_seed);
            cfg.set("eval", "frames_per_clip", frames_per_clip);
            let train_cfg: TrainConfig = cfg.resolve(
                "train",
                TrainConfig {
                    seed,
                    ..TrainConfig::finetune_default(task)
                },
            )?;
            let eval: EvalConfig = cfg.resolve("eval", EvalConfig::default())?;
            let mut train_clips = load_clips(&manifest, SplitArg::Train)?;
            let mut held_clips = load_clips(&manifest, SplitArg::Heldout)?;
            if task == Task::Pose {
                train_clips = pose_clips(train_clips);
                held_clips = pose_clips(held_clips);
            }
            if let Some(k) = clips_per_class {
                train_clips = limit_per_class(train_clips, k);
            }
            cfg.set_root("clips_per_class", clips_per_class);
            let (train_set, held_set) = match task {
                Task::Classify => {
                    let classes = eval.classes.unwrap_or_else(|| class_count(&train_clips, &held_clips));
                    let h = if held_clips.is_empty() {
                        None
                    } else {
                        Some(classify_frames(&held_clips, eval.frames_per_clip, classes)?)
                    };
                    (classify_frames(&train_clips, eval.frames_per_clip, classes)?, h)
                }
                _ => {
                    let h = if held_clips.is_empty() {
                        None
                    } else {
                        Some(pose_frames(&held_clips, eval.frames_per_clip)?)
                    };
                    (pose_frames(&train_clips, eval.frames_per_clip)?, h)
                }
            };
            let init_model = init.as_deref().map(load_model).transpose()?;
            let backbone: BackboneConfig = cfg.resolve(
                "backbone",
                BackboneConfig {
                    input: train_set.shape,
                    ..BackboneConfig::default()
                },
            )?;
            cfg.set_root("init", init.as_ref().map(|p| p.display().to_string()));
            cfg.write(&out)?;
            let outcome = finetune(init_model.as_ref(), backbone, &train_cfg, &train_set, held_set.as_ref());
            finish_training(outcome, &train_cfg, &out)?;
        }
        Command::Eval {
            ckpt,
            shard,
            manifest,
            split,
            frames_per_clip,
        } => {
            cfg.set("eval", "frames_per_clip", frames_per_clip);
            let eval: EvalConfig = cfg.resolve("eval", EvalConfig::default())?;
            cfg.write(&out)?;
            let (mut model, header) = load_model_with_header(&ckpt)?;
            let mut report = serde_json::Map::new();
            if let Some(path) = &shard {
                let set = load_shard(path)?;
                if model.head("triplet").is_some() || model.head("pair").is_some() {
                    report.insert("tuple_accuracy".into(), json!(eval_tuple_accuracy(&mut model, &set)?));
                } else {
                    let train: TrainConfig = serde_json::from_value(header["extra"]["train"].clone())
                        .map_err(|_| anyhow!("checkpoint has no order head and no training config"))?;
                    let loss = eval_pretext_loss(&mut model, &set, train.task, train.margin)?;
                    report.insert("pretext_loss".into(), json!(loss));
                }
            }
            if let Some(path) = &manifest {
                if model.head("classify").is_some() {
                    let clips = load_clips(path, split)?;
                    let r = eval_classify(&mut model, &clips, eval.frames_per_clip)?;
                    report.insert("accuracy".into(), json!(r.accuracy));
                    report.insert("predictions".into(), json!(r.predictions));
                } else if model.head("pose").is_some() {
                    let clips = pose_clips(load_clips(path, split)?);
                    let set = pose_frames(&clips, eval.frames_per_clip)?;
                    let v = eval_pose_pck(&mut model, &set, eval.alpha)?;
                    report.insert(format!("pck@{}", eval.alpha), json!(v));
                } else {
                    return Err(CliError::invalid("manifest", "checkpoint has no classify or pose head"));
                }
            }
            if report.is_empty() {
                return Err(CliError::invalid("shard", "give --shard and/or --manifest"));
            }
            write_json(&out.join("eval.json"), &report)?;
            println!("{}", serde_json::Value::Object(report));
        }
        Command::Nn {
            ckpt,
            manifest,
            query_clip,
            query_frame,
            k,
            dedup_ssd,
            split,
        } => {
            cfg.write(&out)?;
            let mut model = load_model(&ckpt)?;
            let clips = load_clips(&manifest, split)?;
            let query = clips
                .iter()
                .find(|c| c.id == query_clip)
                .ok_or_else(|| CliError::invalid("query_clip", format!("no clip '{query_clip}' in the manifest split")))?;
            let frame: &Frame = query.frames.get(query_frame).ok_or_else(|| {
                CliError::invalid("query_frame", format!("{query_frame} out of range for {} frames", query.len()))
            })?;
            let q = model.embed(frame).map_err(CliError::from)?;
            let corpus = embed_corpus(&mut model, &clips, None)?;
            let hits = nn_retrieve(&corpus, &q, &query_clip, k, dedup_ssd)?;
            let report = json!({ "query_clip": query_clip, "query_frame": query_frame, "neighbors": hits });
            write_json(&out.join("nn.json"), &report)?;
            println!("{report}");
        }
        Command::Fill {
            ckpt,
            manifest,
            split,
            trials,
            candidates,
            gap,
            min_sep,
        } => {
            cfg.set("eval", "trials", trials);
            cfg.set("eval", "candidates", candidates);
            cfg.set("eval", "gap", gap);
            cfg.set("eval", "min_sep", min_sep);
            let eval: EvalConfig = cfg.resolve("eval", EvalConfig::default())?;
            cfg.write(&out)?;
            let mut model = load_model(&ckpt)?;
            let clips = load_clips(&manifest, split)?;
            let t = fill_trials(&clips, eval.trials, eval.candidates, eval.gap, eval.min_sep, seed)?;
            let report = run_fill_trials(&mut model, &clips, &t, kind_name)?;
            write_json(&out.join("fill.json"), &report)?;
            println!("{}", serde_json::to_string(&report).expect("report serialises"));
        }
        Command::Pck {
            ckpt,
            manifest,
            alphas,
            split,
            frames_per_clip,
        } => {
            cfg.set("eval", "alphas", alphas);
            cfg.set("eval", "frames_per_clip", frames_per_clip);
            let eval: EvalConfig = cfg.resolve("eval", EvalConfig::default())?;
            let grid = parse_alpha_grid(&eval.alphas)?;
            cfg.write(&out)?;
            let mut model = load_model(&ckpt)?;
            if model.head("pose").is_none() {
                return Err(CliError::invalid("ckpt", "checkpoint has no pose head"));
            }
            let clips = pose_clips(load_clips(&manifest, split)?);
            let set = pose_frames(&clips, eval.frames_per_clip)?;
            let gts = frame_set_keypoints(&set)?;
            let preds = predict_keypoints(&mut model, &set.frames)?;
            let curve = pck_curve(&preds, &gts, &grid)?;
            fs::write(out.join("pck.csv"), curve.to_csv())?;
            fs::write(out.join("pck.svg"), curve.to_svg())?;
            println!(
                "{}",
                json!({ "rows": grid.len(), "csv": out.join("pck.csv"), "svg": out.join("pck.svg") })
            );
        }
        Command::Activations {
            ckpt,
            manifest,
            layer,
            unit,
            k,
            split,
        } => {
            cfg.write(&out)?;
            let mut model = load_model(&ckpt)?;
            let clips = load_clips(&manifest, split)?;
            let frames: Vec<(String, &Frame)> = clips
                .iter()
                .flat_map(|c| c.frames.iter().map(move |f| (c.id.clone(), f)))
                .collect();
            let top = top_activations(&mut model, &layer, unit, &frames, k)?;
            let report = json!({ "layer": layer, "unit": unit, "top": top });
            write_json(&out.join("activations.json"), &report)?;
            println!("{report}");
        }
        Command::Plot { metrics } => {
            cfg.write(&out)?;
            let svg = plot_metrics(&metrics)?;
            fs::write(out.join("plot.svg"), svg)?;
            println!("{}", json!({ "svg": out.join("plot.svg") }));
        }
    }
    Ok(())
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse::<Task>().map_err(|e| CliError::invalid("task", e.to_string()))
}

fn parse_mix(kinds: &[String]) -> Result<Option<Vec<(SynthKind, f64)>>> {
    if kinds.is_empty() {
        return Ok(None);
    }
    let mut mix = Vec::new();
    for k in kinds {
        let (name, weight) = match k.split_once('=') {
            Some((n, w)) => (
                n,
                w.parse::<f64>()
                    .map_err(|e| CliError::invalid("kind", format!("weight in '{k}': {e}")))?,
            ),
            None => (k.as_str(), 1.0),
        };
        let kind = name.parse::<SynthKind>().map_err(|e| CliError::invalid("kind", e))?;
        if !(weight > 0.0) {
            return Err(CliError::invalid("kind", format!("weight in '{k}' must be positive")));
        }
        mix.push((kind, weight));
    }
    let total: f64 = mix.iter().map(|m| m.1).sum();
    Ok(Some(mix.into_iter().map(|(k, w)| (k, w / total)).collect()))
}

fn apply_train_flags(cfg: &mut RunConfig, t: &TrainFlags, seed: Option<u64>) {
    cfg.set("train", "iterations", t.iterations);
    cfg.set("train", "lr", t.lr.map(LrSchedule::fixed));
    cfg.set("train", "batch_size", t.batch_size);
    cfg.set(
        "train",
        "optimizer",
        t.optimizer.map(order_verify::tensor::OptimKind::from),
    );
    cfg.set("train", "weight_decay", t.weight_decay);
    cfg.set("train", "eval_every", t.eval_every);
    cfg.set("train", "seed", seed);
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Heldout => "heldout",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

fn kind_name(label: Option<usize>) -> String {
    label
        .and_then(SynthKind::from_label)
        .map_or_else(|| "unlabelled".to_string(), |k| k.name().to_string())
}

/// Clips of one split, in manifest order.
fn load_clips(manifest: &Path, split: SplitArg) -> Result<Vec<VideoClip>> {
    let clips: Vec<VideoClip> = load_manifest_clips(manifest, split.split())?
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    Ok(clips)
}

/// Clips whose keypoints carry the most common largest name set (the articulated kind).
fn pose_clips(clips: Vec<VideoClip>) -> Vec<VideoClip> {
    let names = |c: &VideoClip| -> Option<Vec<String>> {
        c.keypoints
            .as_ref()
            .and_then(|k| k.first())
            .map(|s| s.points.iter().map(|p| p.name.clone()).collect())
    };
    let widest = clips.iter().filter_map(names).max_by_key(Vec::len);
    match widest {
        Some(w) => clips.into_iter().filter(|c| names(c).as_ref() == Some(&w)).collect(),
        None => clips,
    }
}

fn limit_per_class(clips: Vec<VideoClip>, k: usize) -> Vec<VideoClip> {
    let mut seen: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    clips
        .into_iter()
        .filter(|c| {
            let n = seen.entry(c.label).or_default();
            *n += 1;
            *n <= k
        })
        .collect()
}

fn class_count(a: &[VideoClip], b: &[VideoClip]) -> usize {
    a.iter()
        .chain(b)
        .filter_map(|c| c.label)
        .max()
        .map_or(SynthKind::ALL.len(), |m| (m + 1).max(SynthKind::ALL.len()))
}

fn load_model_with_header(path: &Path) -> Result<(Model, serde_json::Value)> {
    let ckpt: Checkpoint = read_checkpoint(path).map_err(|e| anyhow!("{e}"))?;
    let (model, _) = Model::from_checkpoint(&ckpt).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok((model, ckpt.header))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_model_with_header(path)?.0)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).context("serialising report")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes the checkpoint, metrics and a summary; a diverged run leaves `last_good.ckpt`.
fn finish_training(outcome: std::result::Result<TrainOutcome, PipelineError>, cfg: &TrainConfig, out: &Path) -> Result<()> {
    match outcome {
        Ok(o) => {
            let ckpt = o.checkpoint(cfg);
            let path = out.join("model.ckpt");
            write_checkpoint(&path, &ckpt).map_err(|e| anyhow!("{e}"))?;
            fs::write(out.join("metrics.csv"), o.log.to_csv())?;
            let digest = Sha256::digest(ckpt.to_bytes());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            println!(
                "{}",
                json!({
                    "checkpoint": path,
                    "sha256": hex,
                    "final_loss": o.log.rows.last().map(|r| r.loss),
                    o.log.metric_name.clone(): o.log.final_metric(),
                    "warnings": o.warnings,
                })
            );
            Ok(())
        }
        Err(PipelineError::Diverged { iteration, last_good }) => {
            let path: PathBuf = out.join("last_good.ckpt");
            write_checkpoint(&path, &last_good.checkpoint(cfg)).map_err(|e| anyhow!("{e}"))?;
            fs::write(out.join("metrics.csv"), last_good.log.to_csv())?;
            Err(CliError::Other(anyhow!(
                "loss became non-finite at iteration {iteration}; last good state saved to {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn plot_metrics(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::invalid("metrics", "empty file"))?
        .split(',')
        .collect();
    if header.len() < 2 || header[0] != "iteration" {
        return Err(CliError::invalid("metrics", "expected an `iteration,...` header"));
    }
    let mut series: Vec<Series> = header[1..]
        .iter()
        .map(|n| Series {
            name: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let x: f64 = cells[0]
            .parse()
            .map_err(|e| CliError::invalid("metrics", format!("row {}: {e}", i + 1)))?;
        for (s, cell) in series.iter_mut().zip(&cells[1..]) {
            if let Ok(y) = cell.parse::<f64>() {
                s.points.push((x, y));
            }
        }
    }
    let title = path.file_name().map_or("metrics".into(), |n| n.to_string_lossy().into_owned());
    Ok(line_plot_svg(&title, "iteration", "value", &series))
}
