//! Temporal order verification as a self-supervised pretext task.
//!
//! The crate covers the whole loop at desk scale:
//!
//! - [`corpus`]: frame I/O, a deterministic synthetic video generator, frame distances
//! - [`motion`]: coarse block-matching flow and per-frame motion weights
//! - [`sampler`]: motion-biased five-frame draws, tuple assembly, binary shards
//! - [`tensor`]: dense float64 tensors with reverse-mode differentiation and optimizers
//! - [`model`]: the shared-weight backbone, order/pair/contrastive heads, transfer heads
//! - [`pipeline`]: class-balanced batching, training loops and every evaluation procedure
//!
//! Frames are stored as `f32` in `[0, 1]`; everything that is differentiated runs in `f64`.

pub mod corpus;
mod io;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod sampler;
pub mod tensor;

pub use corpus::{Frame, FrameShape, KeypointSet, SynthConfig, SynthKind, VideoClip};
pub use model::{BackboneConfig, Model, StageConfig};
pub use motion::{FlowField, MotionProfile};
pub use sampler::{FiveFrameDraw, SamplerConfig, TupleSample, TupleSet};
pub use tensor::{Graph, NodeId, ParamStore, Tensor};

/// Threads to use for data-parallel work, read from `ORDER_VERIFY_THREADS`.
pub fn thread_cap() -> Option<usize> {
    std::env::var("ORDER_VERIFY_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
