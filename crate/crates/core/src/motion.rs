//! Coarse block-matching flow and per-frame motion weights.
//!
//! Flow is only used as a proxy for how much is moving, so an exhaustive integer
//! search per block is enough: it is monotone in the true displacement and has no
//! tunable smoothness terms.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Frame, VideoClip};
use crate::io::{get_u32, put_u32};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("frames differ in shape: {0} vs {1}")]
    ShapeMismatch(crate::FrameShape, crate::FrameShape),
    #[error("frame {width}x{height} is smaller than one {block}px block")]
    TooSmall {
        width: usize,
        height: usize,
        block: usize,
    },
    #[error("invalid flow parameters: {0}")]
    Params(String),
    #[error("clip has {0} frame(s); motion needs at least 2")]
    TooShort(usize),
    #[error("profile file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MotionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub block_size: usize,
    pub search_radius: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            block_size: 8,
            search_radius: 4,
        }
    }
}

/// Block-resolution displacement field; `vectors` is row-major over blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub cols: usize,
    pub rows: usize,
    pub block_size: usize,
    pub search_radius: usize,
    pub vectors: Vec<(i32, i32)>,
}

impl FlowField {
    pub fn at(&self, col: usize, row: usize) -> (i32, i32) {
        self.vectors[row * self.cols + col]
    }
}

/// Per-frame weights; the last frame repeats its predecessor's weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionProfile {
    pub weights: Vec<f64>,
}

impl MotionProfile {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Integer block matching from `f_t` to `f_next`.
///
/// Each block takes the shift in `[-r, r]^2` with the lowest mean squared difference
/// over the in-bounds part of the displaced block. Ties go to the smallest `|dx|+|dy|`,
/// then to the lexicographically smallest `(dx, dy)`.
pub fn estimate_flow(
    f_t: &Frame,
    f_next: &Frame,
    block_size: usize,
    search_radius: usize,
) -> Result<FlowField> {
    if f_t.shape != f_next.shape {
        return Err(MotionError::ShapeMismatch(f_t.shape, f_next.shape));
    }
    if block_size < 4 || search_radius < 1 {
        return Err(MotionError::Params(format!(
            "block_size {block_size} (>= 4), search_radius {search_radius} (>= 1)"
        )));
    }
    let (w, h) = (f_t.shape.width, f_t.shape.height);
    if w < block_size || h < block_size {
        return Err(MotionError::TooSmall {
            width: w,
            height: h,
            block: block_size,
        });
    }
    let a = f_t.luma();
    let b = f_next.luma();
    let cols = w.div_ceil(block_size);
    let rows = h.div_ceil(block_size);
    let r = search_radius as i32;
    let mut vectors = Vec::with_capacity(cols * rows);
    for by in 0..rows {
        for bx in 0..cols {
            let (x0, y0) = (bx * block_size, by * block_size);
            let (x1, y1) = ((x0 + block_size).min(w), (y0 + block_size).min(h));
            let mut best: Option<(f64, i32, i32, i32)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut sum = 0.0f64;
                    let mut n = 0usize;
                    for y in y0..y1 {
                        let yy = y as i32 + dy;
                        if yy < 0 || yy >= h as i32 {
                            continue;
                        }
                        let row_a = &a[y * w..(y + 1) * w];
                        let row_b = &b[yy as usize * w..(yy as usize + 1) * w];
                        for x in x0..x1 {
                            let xx = x as i32 + dx;
                            if xx < 0 || xx >= w as i32 {
                                continue;
                            }
                            let d = row_a[x] as f64 - row_b[xx as usize] as f64;
                            sum += d * d;
                            n += 1;
                        }
                    }
                    if n == 0 {
                        continue;
                    }
                    let cost = sum / n as f64;
                    let cand = (cost, dx.abs() + dy.abs(), dx, dy);
                    let better = match best {
                        None => true,
                        Some(b) => {
                            cand.0 < b.0
                                || (cand.0 == b.0 && (cand.1, cand.2, cand.3) < (b.1, b.2, b.3))
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("block overlaps itself at zero shift");
            vectors.push((dx, dy));
        }
    }
    Ok(FlowField {
        cols,
        rows,
        block_size,
        search_radius,
        vectors,
    })
}

/// Mean flow magnitude over blocks.
pub fn frame_motion_weight(flow: &FlowField) -> f64 {
    if flow.vectors.is_empty() {
        return 0.0;
    }
    flow.vectors
        .iter()
        .map(|&(dx, dy)| ((dx * dx + dy * dy) as f64).sqrt())
        .sum::<f64>()
        / flow.vectors.len() as f64
}

pub fn motion_profile(clip: &VideoClip, cfg: &FlowConfig) -> Result<MotionProfile> {
    let n = clip.len();
    if n < 2 {
        return Err(MotionError::TooShort(n));
    }
    let mut weights = (0..n - 1)
        .into_par_iter()
        .map(|t| {
            estimate_flow(
                &clip.frames[t],
                &clip.frames[t + 1],
                cfg.block_size,
                cfg.search_radius,
            )
            .map(|f| frame_motion_weight(&f))
        })
        .collect::<Result<Vec<f64>>>()?;
    weights.push(weights[n - 2]);
    Ok(MotionProfile { weights })
}

const MOTP_MAGIC: &[u8; 4] = b"MOTP";

/// `MOTP`, u32 length, then f32 weights, little-endian.
pub fn write_profile(path: &Path, profile: &MotionProfile) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MOTP_MAGIC)?;
    put_u32(&mut w, profile.weights.len() as u32)?;
    let ws: Vec<f32> = profile.weights.iter().map(|&v| v as f32).collect();
    crate::io::put_f32s(&mut w, &ws)?;
    w.flush()?;
    Ok(())
}

pub fn read_profile(path: &Path) -> Result<MotionProfile> {
    use std::io::Read;
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MOTP_MAGIC {
        return Err(MotionError::Format(format!("bad magic {magic:?}")));
    }
    let n = get_u32(&mut r)? as usize;
    let ws = crate::io::get_f32s(&mut r, n).map_err(|e| {
        if crate::io::is_eof(&e) {
            MotionError::Format(format!("truncated: expected {n} weights"))
        } else {
            MotionError::Io(e)
        }
    })?;
    Ok(MotionProfile {
        weights: ws.into_iter().map(f64::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_clip, FrameShape, SynthConfig, SynthKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture sampled at integer offsets, so shifted copies are exact.
    fn textured(w: usize, h: usize, shift_x: i32, shift_y: i32, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big = 64usize;
        let canvas: Vec<f32> = (0..big * big).map(|_| rng.random::<f32>()).collect();
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let cx = (x as i32 - shift_x + 16) as usize;
                let cy = (y as i32 - shift_y + 16) as usize;
                px.push(canvas[cy * big + cx]);
            }
        }
        Frame::new(FrameShape::new(w, h, 1), px, 0).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = textured(32, 32, 0, 0, 1);
        let flow = estimate_flow(&f, &f, 8, 4).unwrap();
        assert_eq!((flow.cols, flow.rows), (4, 4));
        assert!(flow.vectors.iter().all(|&v| v == (0, 0)));
    }

    #[test]
    fn pure_shift_recovered_in_interior() {
        let a = textured(32, 32, 0, 0, 2);
        let b = textured(32, 32, 2, 0, 2);
        let flow = estimate_flow(&a, &b, 8, 3).unwrap();
        for row in 0..flow.rows {
            for col in 0..flow.cols {
                assert_eq!(flow.at(col, row), (2, 0), "block ({col},{row})");
            }
        }
        let c = textured(32, 32, -1, 3, 2);
        let flow = estimate_flow(&a, &c, 8, 4).unwrap();
        assert_eq!(flow.at(1, 1), (-1, 3));
        assert_eq!(flow.at(2, 2), (-1, 3));
    }

    #[test]
    fn flat_frames_tie_break_to_zero() {
        let f = Frame::new(FrameShape::new(16, 16, 1), vec![0.5; 256], 0).unwrap();
        let flow = estimate_flow(&f, &f.clone(), 4, 2).unwrap();
        assert!(flow.vectors.iter().all(|&v| v == (0, 0)));
    }

    #[test]
    fn grid_dims_round_up() {
        let a = textured(20, 12, 0, 0, 3);
        let flow = estimate_flow(&a, &a, 8, 1).unwrap();
        assert_eq!((flow.cols, flow.rows), (3, 2));
    }

    #[test]
    fn too_small_frame_errors() {
        let a = Frame::zeros(FrameShape::new(8, 8, 1), 0);
        assert!(matches!(
            estimate_flow(&a, &a, 16, 2),
            Err(MotionError::TooSmall { .. })
        ));
        assert!(estimate_flow(&a, &a, 3, 2).is_err());
    }

    #[test]
    fn weight_examples() {
        let mk = |v: (i32, i32), n: usize| FlowField {
            cols: n,
            rows: 1,
            block_size: 8,
            search_radius: 4,
            vectors: vec![v; n],
        };
        assert_eq!(frame_motion_weight(&mk((0, 0), 4)), 0.0);
        assert_eq!(frame_motion_weight(&mk((3, 4), 4)), 5.0);
        assert_eq!(frame_motion_weight(&mk((-3, 4), 9)), 5.0);
    }

    #[test]
    fn weight_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<(i32, i32)> = (0..30)
            .map(|_| (rng.random_range(-4..=4), rng.random_range(-4..=4)))
            .collect();
        let mut acc = 0.0;
        for &(dx, dy) in &vectors {
            acc += ((dx as f64).powi(2) + (dy as f64).powi(2)).sqrt();
        }
        let field = FlowField {
            cols: 6,
            rows: 5,
            block_size: 8,
            search_radius: 4,
            vectors,
        };
        assert!((frame_motion_weight(&field) - acc / 30.0).abs() < 1e-12);
    }

    #[test]
    fn static_clip_profile_is_zero() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::canonical(SynthKind::Static, 8, 32, 1)
        };
        let clip = gen_clip(&cfg).unwrap();
        let p = motion_profile(&clip, &FlowConfig::default()).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn linear_clip_weight_tracks_pan_speed() {
        let cfg = SynthConfig {
            amplitude: 2.0,
            noise_std: 0.0,
            ..SynthConfig::canonical(SynthKind::Linear, 12, 32, 4)
        };
        let clip = gen_clip(&cfg).unwrap();
        let p = motion_profile(&clip, &FlowConfig::default()).unwrap();
        assert_eq!(p.len(), clip.len());
        for (t, w) in p.weights.iter().enumerate() {
            assert!((w - 2.0).abs() <= 0.5, "frame {t}: weight {w}");
        }
        assert_eq!(p.weights[11], p.weights[10]);
    }

    #[test]
    fn single_frame_clip_errors() {
        let mut clip = gen_clip(&SynthConfig::canonical(SynthKind::Static, 1, 16, 0)).unwrap();
        assert!(matches!(
            motion_profile(&clip, &FlowConfig::default()),
            Err(MotionError::TooShort(1))
        ));
        clip.frames.clear();
        assert!(motion_profile(&clip, &FlowConfig::default()).is_err());
    }

    #[test]
    fn profile_invariant_under_pixel_scaling() {
        let cfg = SynthConfig::canonical(SynthKind::Pendulum, 10, 32, 8);
        let clip = gen_clip(&cfg).unwrap();
        let base = motion_profile(&clip, &FlowConfig::default()).unwrap();
        for c in [0.5f32, 0.25] {
            let mut scaled = clip.clone();
            for f in &mut scaled.frames {
                f.pixels.iter_mut().for_each(|v| *v *= c);
            }
            assert_eq!(motion_profile(&scaled, &FlowConfig::default()).unwrap(), base);
        }
    }

    #[test]
    fn profile_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = MotionProfile {
            weights: vec![0.0, 1.5, 2.25, 2.25],
        };
        let path = dir.path().join("p.motp");
        write_profile(&path, &p).unwrap();
        assert_eq!(read_profile(&path).unwrap(), p);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MOTP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_profile(&path), Err(MotionError::Format(_))));
    }
}
