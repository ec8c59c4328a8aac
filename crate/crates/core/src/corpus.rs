//! Frames, clips, the synthetic video generator and frame-level distances.
//!
//! Frames live on disk as binary graymaps/pixmaps (`P5`/`P6`, maxval 255) named
//! `frame_%06d.pgm` (or `.ppm`), one directory per clip, indexed by a JSON-lines
//! manifest. In memory, pixels are `f32` in `[0, 1]`, row-major, channel-interleaved.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("clip {clip}: frame {index} missing ({path})")]
    Gap {
        clip: String,
        index: usize,
        path: PathBuf,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(FrameShape, FrameShape),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl FrameShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for FrameShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub shape: FrameShape,
    pub pixels: Vec<f32>,
    /// Position within the owning clip.
    pub index: usize,
}

impl Frame {
    pub fn new(shape: FrameShape, pixels: Vec<f32>, index: usize) -> Result<Self> {
        if shape.width < 8 || shape.height < 8 {
            return Err(CorpusError::Config(format!(
                "frame {shape} smaller than 8x8"
            )));
        }
        if !(shape.channels == 1 || shape.channels == 3) {
            return Err(CorpusError::Config(format!(
                "unsupported channel count {}",
                shape.channels
            )));
        }
        if pixels.len() != shape.len() {
            return Err(CorpusError::Config(format!(
                "pixel buffer of {} values for shape {shape}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CorpusError::Config(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            shape,
            pixels,
            index,
        })
    }

    pub fn zeros(shape: FrameShape, index: usize) -> Self {
        Self {
            shape,
            pixels: vec![0.0; shape.len()],
            index,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.shape.width + x) * self.shape.channels + c]
    }

    /// Luma plane (`0.299R + 0.587G + 0.114B` for colour frames).
    pub fn luma(&self) -> Vec<f32> {
        match self.shape.channels {
            1 => self.pixels.clone(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// 8-bit samples, `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(shape: FrameShape, bytes: &[u8], index: usize) -> Self {
        Self {
            shape,
            pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_true")]
    pub in_frame: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    /// Normalisation length for PCK, in pixels.
    pub ref_length: f64,
}

impl KeypointSet {
    pub fn get(&self, name: &str) -> Option<&Keypoint> {
        self.points.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub label: Option<usize>,
    pub keypoints: Option<Vec<KeypointSet>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Option<FrameShape> {
        self.frames.first().map(|f| f.shape)
    }
}

/// Sum of squared pixel differences.
pub fn frame_ssd(a: &Frame, b: &Frame) -> Result<f64> {
    frame_ssd_downsampled(a, b, 1)
}

/// SSD over every `factor`-th row and column.
pub fn frame_ssd_downsampled(a: &Frame, b: &Frame, factor: usize) -> Result<f64> {
    if a.shape != b.shape {
        return Err(CorpusError::ShapeMismatch(a.shape, b.shape));
    }
    let factor = factor.max(1);
    if factor == 1 {
        return Ok(a
            .pixels
            .iter()
            .zip(&b.pixels)
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum());
    }
    let s = a.shape;
    let mut acc = 0.0;
    for y in (0..s.height).step_by(factor) {
        for x in (0..s.width).step_by(factor) {
            for c in 0..s.channels {
                let d = a.at(x, y, c) as f64 - b.at(x, y, c) as f64;
                acc += d * d;
            }
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// PNM frame files

pub fn frame_file_name(index: usize, channels: usize) -> String {
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    format!("frame_{index:06}.{ext}")
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let (subtype, color) = match frame.shape.channels {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        _ => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
    };
    PnmEncoder::new(&mut w)
        .with_subtype(subtype)
        .write_image(
            &frame.to_bytes(),
            frame.shape.width as u32,
            frame.shape.height as u32,
            color,
        )
        .map_err(|e| CorpusError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    w.flush().map_err(io_err(path))
}

pub fn read_frame(path: &Path, index: usize) -> Result<Frame> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fmt_err = |msg: String| CorpusError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| fmt_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(fmt_err(format!(
                "unsupported sample layout {:?}; expected 8-bit P5/P6",
                other.color()
            )))
        }
    };
    if w < 8 || h < 8 {
        return Err(fmt_err(format!("frame {w}x{h} smaller than 8x8")));
    }
    Ok(Frame::from_bytes(FrameShape::new(w, h, channels), &raw, index))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Clip directory, relative to the manifest's directory.
    pub path: String,
    pub n_frames: usize,
    pub fps: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints_path: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| CorpusError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn manifest_lines(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        s.push('\n');
    }
    s
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_lines(entries)).map_err(io_err(path))
}

/// Hex SHA-256 of the serialized manifest.
pub fn manifest_hash(entries: &[ManifestEntry]) -> String {
    let digest = Sha256::digest(manifest_lines(entries).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes the clip described by `entry`; `base` is the manifest's directory.
pub fn load_clip(base: &Path, entry: &ManifestEntry) -> Result<VideoClip> {
    let dir = base.join(&entry.path);
    let mut frames: Vec<Frame> = Vec::with_capacity(entry.n_frames);
    for index in 0..entry.n_frames {
        let gray = dir.join(frame_file_name(index, 1));
        let rgb = dir.join(frame_file_name(index, 3));
        let path = if gray.exists() {
            gray
        } else if rgb.exists() {
            rgb
        } else {
            return Err(CorpusError::Gap {
                clip: entry.id.clone(),
                index,
                path: gray,
            });
        };
        let frame = read_frame(&path, index)?;
        if let Some(first) = frames.first() {
            if first.shape != frame.shape {
                return Err(CorpusError::Format {
                    path,
                    msg: format!(
                        "frame shape {} differs from first frame {}",
                        frame.shape, first.shape
                    ),
                });
            }
        }
        frames.push(frame);
    }
    let keypoints = match &entry.keypoints_path {
        Some(rel) => {
            let path = base.join(rel);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let kps: Vec<KeypointSet> =
                serde_json::from_str(&text).map_err(|e| CorpusError::Format {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
            if kps.len() != frames.len() {
                return Err(CorpusError::Format {
                    path,
                    msg: format!("{} keypoint sets for {} frames", kps.len(), frames.len()),
                });
            }
            if let Some(bad) = kps.iter().find(|k| !(k.ref_length > 0.0)) {
                return Err(CorpusError::Format {
                    path,
                    msg: format!("non-positive ref_length {}", bad.ref_length),
                });
            }
            Some(kps)
        }
        None => None,
    };
    Ok(VideoClip {
        id: entry.id.clone(),
        frames,
        fps: entry.fps,
        label: entry.label,
        keypoints,
    })
}

/// Writes frames (and keypoints, if any) into `base/<clip.id>/`, returning the manifest entry.
pub fn write_clip(base: &Path, clip: &VideoClip, split: Split) -> Result<ManifestEntry> {
    let rel = clip.id.clone();
    let dir = base.join(&rel);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for f in &clip.frames {
        write_frame(&dir.join(frame_file_name(f.index, f.shape.channels)), f)?;
    }
    let keypoints_path = match &clip.keypoints {
        Some(kps) => {
            let rel_kp = format!("{rel}/keypoints.json");
            let path = base.join(&rel_kp);
            let text = serde_json::to_string(kps).expect("keypoints serialize");
            fs::write(&path, text).map_err(io_err(&path))?;
            Some(rel_kp)
        }
        None => None,
    };
    Ok(ManifestEntry {
        id: clip.id.clone(),
        path: rel,
        n_frames: clip.len(),
        fps: clip.fps,
        split,
        label: clip.label,
        keypoints_path,
    })
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Camera pan across a textured scene holding one object.
    Linear,
    /// Bob on a rod swinging about a pivot at the top edge.
    Pendulum,
    /// Ball falling under gravity and rebounding off a floor line.
    Bounce,
    /// Nothing moves.
    Static,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Linear,
        SynthKind::Pendulum,
        SynthKind::Bounce,
        SynthKind::Static,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Linear => "linear",
            SynthKind::Pendulum => "pendulum",
            SynthKind::Bounce => "bounce",
            SynthKind::Static => "static",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown clip kind '{s}'"))
    }
}

/// Parameters of one synthetic clip.
///
/// `amplitude` means pan speed in px/frame for `Linear`, swing amplitude in px for
/// `Pendulum`, and drop height in px for `Bounce`. `period` (frames) and `phase`
/// (fraction of a period) apply to the two periodic kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub object_size: usize,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub noise_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Motion parameters chosen so that one clip covers a single monotone sweep where
    /// possible: pan across ~60% of the width, a half swing from the left extreme, a
    /// drop whose rebound stops well below the release height.
    pub fn canonical(kind: SynthKind, n_frames: usize, size: usize, seed: u64) -> Self {
        let object_size = (size / 5).max(3);
        let span = (n_frames.max(2) - 1) as f64;
        let (amplitude, period, phase) = match kind {
            SynthKind::Linear => (0.6 * size as f64 / span, 0.0, 0.0),
            SynthKind::Pendulum => (
                size as f64 / 2.0 - object_size as f64 / 2.0 - 1.0,
                2.0 * span,
                -0.25,
            ),
            SynthKind::Bounce => (size as f64 - object_size as f64 - 6.0, 1.6 * span, 0.0),
            SynthKind::Static => (0.0, 0.0, 0.0),
        };
        Self {
            kind,
            n_frames,
            width: size,
            height: size,
            object_size,
            amplitude,
            period,
            phase,
            noise_std: 0.02,
            fps: 25.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CorpusError::Config(m));
        if self.width < 8 || self.height < 8 {
            return err(format!("image {}x{} smaller than 8x8", self.width, self.height));
        }
        if self.object_size == 0 || self.object_size >= self.width.min(self.height) {
            return err(format!(
                "object size {} must be in 1..{}",
                self.object_size,
                self.width.min(self.height)
            ));
        }
        if self.n_frames == 0 {
            return err("n_frames must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err(format!("noise stddev {}", self.noise_std));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return err(format!("amplitude {}", self.amplitude));
        }
        if matches!(self.kind, SynthKind::Pendulum | SynthKind::Bounce) && !(self.period > 0.0) {
            return err(format!("period {} must be positive", self.period));
        }
        Ok(())
    }
}

/// Smooth procedural texture: a few random plane waves squeezed into `[lo, hi]`.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    lo: f64,
    hi: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        let waves = (0..5)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.15..0.9);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        Self { waves, lo, hi }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let v: f64 = self
            .waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum::<f64>()
            / total;
        self.lo + (self.hi - self.lo) * 0.5 * (v + 1.0)
    }
}

fn disc_coverage(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
    (r + 0.5 - d).clamp(0.0, 1.0)
}

fn segment_coverage(px: f64, py: f64, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt();
    (1.0 - d).clamp(0.0, 1.0)
}

/// Renders a deterministic clip; the seed fixes texture, object placement and noise.
pub fn gen_clip(cfg: &SynthConfig) -> Result<VideoClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let r = cfg.object_size as f64 / 2.0;
    let texture = Texture::random(&mut rng, 0.1, 0.45);
    let brightness = rng.random_range(0.8..1.0);
    let jitter = rng.random_range(-1.0..1.0);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid stddev");
    let shape = FrameShape::new(cfg.width, cfg.height, 1);
    let ref_length = cfg.object_size as f64 * std::f64::consts::SQRT_2;
    let span = (cfg.n_frames.max(2) - 1) as f64;

    // Fixed geometry shared by every frame.
    let pivot = (w / 2.0 + jitter, 1.0);
    let rod = (h - r - 3.0 - pivot.1).max(cfg.amplitude + 1.0);
    let floor_y = h - 3.0;
    let pan_cx = (w + cfg.amplitude * span) / 2.0;
    let pan_cy = h / 2.0 + jitter * (h / 2.0 - r - 2.0) * 0.5;
    let static_c = (
        rng.random_range(r + 1.0..w - r - 1.0),
        rng.random_range(r + 1.0..h - r - 1.0),
    );
    let bounce_x = w / 2.0 + jitter * (w / 2.0 - r - 2.0) * 0.5;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut keypoints = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        let tf = t as f64;
        let mut pan = 0.0;
        let mut rod_seg = None;
        let mut floor = false;
        let center = match cfg.kind {
            SynthKind::Linear => {
                pan = cfg.amplitude * tf;
                (pan_cx - pan, pan_cy)
            }
            SynthKind::Pendulum => {
                let x = cfg.amplitude * (std::f64::consts::TAU * (tf / cfg.period + cfg.phase)).sin();
                let y = (rod * rod - x * x).max(0.0).sqrt();
                let bob = (pivot.0 + x, pivot.1 + y);
                rod_seg = Some((pivot, bob));
                bob
            }
            SynthKind::Bounce => {
                let u = 2.0 * (tf / cfg.period + cfg.phase + 0.5).rem_euclid(1.0) - 1.0;
                let lift = cfg.amplitude * (1.0 - u * u);
                floor = true;
                (bounce_x, floor_y - 1.0 - r - lift)
            }
            SynthKind::Static => static_c,
        };
        let mut pixels = Vec::with_capacity(shape.len());
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (px, py) = (x as f64, y as f64);
                let mut v = texture.at(px + pan, py);
                if floor && (py - floor_y).abs() < 0.5 {
                    v = 0.65;
                }
                if let Some((a, b)) = rod_seg {
                    let c = segment_coverage(px, py, a, b);
                    v = v * (1.0 - c) + 0.7 * c;
                }
                let c = disc_coverage(px, py, center.0, center.1, r);
                if c > 0.0 {
                    // dark core gives block matching something to lock onto
                    let core = disc_coverage(px, py, center.0, center.1, r * 0.35);
                    let obj = brightness * (1.0 - 0.6 * core);
                    v = v * (1.0 - c) + obj * c;
                }
                if cfg.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                pixels.push(q as f32);
            }
        }
        frames.push(Frame {
            shape,
            pixels,
            index: t,
        });
        let inside = |(x, y): (f64, f64)| x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0;
        let mut points = vec![Keypoint {
            name: "center".into(),
            x: center.0,
            y: center.1,
            in_frame: inside(center),
        }];
        if let Some((a, b)) = rod_seg {
            let mid = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            points.push(Keypoint {
                name: "limb".into(),
                x: mid.0,
                y: mid.1,
                in_frame: inside(mid),
            });
        }
        keypoints.push(KeypointSet { points, ref_length });
    }
    Ok(VideoClip {
        id: format!("{}-{:016x}", cfg.kind.name(), cfg.seed),
        frames,
        fps: cfg.fps,
        label: Some(cfg.kind.label()),
        keypoints: Some(keypoints),
    })
}

/// Description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_clips: usize,
    pub mix: Vec<(SynthKind, f64)>,
    pub n_frames: usize,
    pub size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn single(kind: SynthKind, n_clips: usize, seed: u64) -> Self {
        Self {
            n_clips,
            mix: vec![(kind, 1.0)],
            n_frames: 24,
            size: 32,
            noise_std: 0.02,
            seed,
        }
    }
}

/// splitmix64 finaliser, used to derive per-item seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a), for per-clip rng streams.
pub fn str_seed(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Largest-remainder apportionment of `n` items over `fractions`.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Generates every clip of `spec` in memory, with its manifest entry.
///
/// Kinds are apportioned exactly; splits are 80/10/10 within each kind, shuffled by seed.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<(ManifestEntry, VideoClip)>> {
    if spec.n_clips == 0 {
        return Err(CorpusError::Config("n_clips must be positive".into()));
    }
    let total: f64 = spec.mix.iter().map(|m| m.1).sum();
    if spec.mix.is_empty() || (total - 1.0).abs() > 1e-6 || spec.mix.iter().any(|m| m.1 < 0.0) {
        return Err(CorpusError::Config(format!(
            "kind fractions must be non-negative and sum to 1 (got {total})"
        )));
    }
    let fractions: Vec<f64> = spec.mix.iter().map(|m| m.1).collect();
    let counts = apportion(spec.n_clips, &fractions);

    let mut plan: Vec<(SynthKind, Split)> = Vec::with_capacity(spec.n_clips);
    for (ki, (&(kind, _), &count)) in spec.mix.iter().zip(&counts).enumerate() {
        let n_train = (count as f64 * 0.8).round() as usize;
        let n_held = ((count as f64 * 0.1).round() as usize).min(count - n_train);
        let mut splits: Vec<Split> = (0..count)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_held {
                    Split::Heldout
                } else {
                    Split::Test
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA11C + ki as u64));
        use rand::seq::SliceRandom;
        splits.shuffle(&mut rng);
        plan.extend(splits.into_iter().map(|s| (kind, s)));
    }

    plan.par_iter()
        .enumerate()
        .map(|(i, &(kind, split))| {
            let cfg = SynthConfig {
                noise_std: spec.noise_std,
                ..SynthConfig::canonical(kind, spec.n_frames, spec.size, mix_seed(spec.seed, i as u64))
            };
            let mut clip = gen_clip(&cfg)?;
            clip.id = format!("clip_{i:05}");
            let entry = ManifestEntry {
                id: clip.id.clone(),
                path: clip.id.clone(),
                n_frames: clip.len(),
                fps: clip.fps,
                split,
                label: clip.label,
                keypoints_path: clip.keypoints.as_ref().map(|_| format!("{}/keypoints.json", clip.id)),
            };
            Ok((entry, clip))
        })
        .collect()
}

/// Writes a synthetic corpus under `out` plus `out/manifest.jsonl`.
pub fn gen_corpus(spec: &CorpusSpec, out: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let clips = synth_corpus(spec)?;
    let entries = clips
        .par_iter()
        .map(|(entry, clip)| write_clip(out, clip, entry.split))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Loads every manifest entry (optionally filtered by split) relative to the manifest's directory.
pub fn load_manifest_clips(
    manifest: &Path,
    split: Option<Split>,
) -> Result<Vec<(ManifestEntry, VideoClip)>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let entries = read_manifest(manifest)?;
    entries
        .into_par_iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| {
            let clip = load_clip(base, &e)?;
            Ok((e, clip))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn frame_from(vals: Vec<f32>, w: usize, h: usize) -> Frame {
        Frame::new(FrameShape::new(w, h, 1), vals, 0).unwrap()
    }

    #[test]
    fn ssd_identity_and_single_pixel() {
        let a = frame_from(vec![0.25; 64], 8, 8);
        assert_eq!(frame_ssd(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.pixels[17] = 0.75;
        assert_eq!(frame_ssd(&a, &b).unwrap(), 0.25);
    }

    #[test]
    fn ssd_rejects_shape_mismatch() {
        let a = frame_from(vec![0.0; 64], 8, 8);
        let b = frame_from(vec![0.0; 72], 9, 8);
        assert!(matches!(frame_ssd(&a, &b), Err(CorpusError::ShapeMismatch(..))));
    }

    #[test]
    fn ssd_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a: Vec<f32> = (0..64).map(|_| rng.random()).collect();
            let b: Vec<f32> = (0..64).map(|_| rng.random()).collect();
            let (fa, fb) = (frame_from(a.clone(), 8, 8), frame_from(b.clone(), 8, 8));
            let mut oracle = 0.0f64;
            for y in 0..8 {
                for x in 0..8 {
                    let d = a[y * 8 + x] as f64 - b[y * 8 + x] as f64;
                    oracle += d * d;
                }
            }
            assert!((frame_ssd(&fa, &fb).unwrap() - oracle).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ssd_symmetric_and_zero_iff_equal(
            a in proptest::collection::vec(0u8..=255, 64),
            b in proptest::collection::vec(0u8..=255, 64),
        ) {
            let s = FrameShape::new(8, 8, 1);
            let fa = Frame::from_bytes(s, &a, 0);
            let fb = Frame::from_bytes(s, &b, 0);
            let ab = frame_ssd(&fa, &fb).unwrap();
            prop_assert_eq!(ab, frame_ssd(&fb, &fa).unwrap());
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(0u8..=255, 3 * 64)) {
            let f = Frame::from_bytes(FrameShape::new(8, 8, 3), &bytes, 0);
            prop_assert_eq!(f.to_bytes(), bytes);
        }
    }

    #[test]
    fn pnm_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..(10 * 9 * 3)).map(|i| (i * 7 % 256) as u8).collect();
        let f = Frame::from_bytes(FrameShape::new(10, 9, 3), &bytes, 4);
        let p = dir.path().join("x.ppm");
        write_frame(&p, &f).unwrap();
        let g = read_frame(&p, 4).unwrap();
        assert_eq!(g, f);
    }

    fn write_gray_dir(dir: &Path, n: usize, skip: Option<usize>) {
        for i in 0..n {
            if Some(i) == skip {
                continue;
            }
            let f = Frame::from_bytes(FrameShape::new(16, 16, 1), &[(i * 40) as u8; 256], i);
            write_frame(&dir.join(frame_file_name(i, 1)), &f).unwrap();
        }
    }

    fn entry(n: usize) -> ManifestEntry {
        ManifestEntry {
            id: "c".into(),
            path: "c".into(),
            n_frames: n,
            fps: 25.0,
            split: Split::Train,
            label: None,
            keypoints_path: None,
        }
    }

    #[test]
    fn load_three_graymaps() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("c")).unwrap();
        write_gray_dir(&dir.path().join("c"), 3, None);
        let clip = load_clip(dir.path(), &entry(3)).unwrap();
        assert_eq!(clip.len(), 3);
        for (i, f) in clip.frames.iter().enumerate() {
            assert_eq!(f.shape, FrameShape::new(16, 16, 1));
            assert_eq!(f.index, i);
        }
        // frame 0 was all zero bytes
        assert!(clip.frames[0].pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_reports_gap() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("c")).unwrap();
        write_gray_dir(&dir.path().join("c"), 3, Some(1));
        match load_clip(dir.path(), &entry(3)) {
            Err(CorpusError::Gap { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn load_reports_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c");
        fs::create_dir(&c).unwrap();
        write_gray_dir(&c, 2, None);
        let odd = Frame::from_bytes(FrameShape::new(8, 8, 1), &[0; 64], 2);
        write_frame(&c.join(frame_file_name(2, 1)), &odd).unwrap();
        assert!(matches!(
            load_clip(dir.path(), &entry(3)),
            Err(CorpusError::Format { .. })
        ));
    }

    #[test]
    fn static_clip_frames_identical_without_noise() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::canonical(SynthKind::Static, 6, 32, 11)
        };
        let clip = gen_clip(&cfg).unwrap();
        for f in &clip.frames[1..] {
            assert_eq!(f.pixels, clip.frames[0].pixels);
        }
    }

    #[test]
    fn gen_clip_is_deterministic() {
        for kind in SynthKind::ALL {
            let cfg = SynthConfig::canonical(kind, 10, 32, 99);
            assert_eq!(gen_clip(&cfg).unwrap(), gen_clip(&cfg).unwrap());
        }
    }

    #[test]
    fn gen_clip_rejects_oversized_object() {
        let cfg = SynthConfig {
            object_size: 32,
            ..SynthConfig::canonical(SynthKind::Linear, 4, 32, 0)
        };
        assert!(matches!(gen_clip(&cfg), Err(CorpusError::Config(_))));
    }

    #[test]
    fn pendulum_half_period_is_injective() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::canonical(SynthKind::Pendulum, 24, 32, 5)
        };
        let clip = gen_clip(&cfg).unwrap();
        for i in 0..clip.len() {
            for j in i + 1..clip.len() {
                assert!(frame_ssd(&clip.frames[i], &clip.frames[j]).unwrap() > 0.0);
            }
        }
        let kps = clip.keypoints.unwrap();
        assert_eq!(kps[0].points.len(), 2);
        let xs: Vec<f64> = kps.iter().map(|k| k.points[0].x).collect();
        assert!(xs.windows(2).all(|w| w[1] > w[0]), "half swing is monotone in x");
    }

    #[test]
    fn pendulum_is_direction_ambiguous_over_full_period() {
        // same x position reached on the way out and on the way back
        let cfg = SynthConfig {
            noise_std: 0.0,
            n_frames: 41,
            period: 40.0,
            phase: 0.0,
            ..SynthConfig::canonical(SynthKind::Pendulum, 41, 32, 5)
        };
        let clip = gen_clip(&cfg).unwrap();
        let kps = clip.keypoints.unwrap();
        assert!((kps[5].points[0].x - kps[15].points[0].x).abs() < 1e-9);
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(4, &[0.5, 0.5]), vec![2, 2]);
        assert_eq!(apportion(10, &[1.0]), vec![10]);
        assert_eq!(apportion(7, &[0.5, 0.25, 0.25]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn corpus_on_disk_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_clips: 4,
            mix: vec![(SynthKind::Linear, 0.5), (SynthKind::Pendulum, 0.5)],
            n_frames: 5,
            ..CorpusSpec::single(SynthKind::Linear, 4, 1)
        };
        let entries = gen_corpus(&spec, dir.path()).unwrap();
        assert_eq!(entries.len(), 4);
        let kinds: Vec<usize> = entries.iter().filter_map(|e| e.label).collect();
        assert_eq!(kinds.iter().filter(|&&k| k == 0).count(), 2);
        let loaded = load_manifest_clips(&dir.path().join("manifest.jsonl"), None).unwrap();
        let mem = synth_corpus(&spec).unwrap();
        for ((_, a), (_, b)) in loaded.iter().zip(&mem) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.keypoints, b.keypoints);
        }
        let again = synth_corpus(&spec).unwrap();
        let ea: Vec<_> = mem.into_iter().map(|c| c.0).collect();
        let eb: Vec<_> = again.into_iter().map(|c| c.0).collect();
        assert_eq!(manifest_hash(&ea), manifest_hash(&eb));
    }

    #[test]
    fn bad_mix_is_rejected() {
        let spec = CorpusSpec {
            mix: vec![(SynthKind::Linear, 0.5)],
            ..CorpusSpec::single(SynthKind::Linear, 4, 1)
        };
        assert!(synth_corpus(&spec).is_err());
    }
}
