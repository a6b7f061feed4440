//! Text-driven stylization of a video object through layered neural atlases.
//!
//! A video is decomposed into a foreground and a background atlas plus
//! per-pixel mapping and opacity networks. Stylization then fine-tunes a
//! copy of the shared atlas against similarity losses computed by a joint
//! text/image embedding model, and re-renders every frame from it.

// range checks are written as `!(x > lo)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atlas;
pub mod embedding;
pub mod error;
pub mod imageops;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod synthetic;
pub mod textaug;
pub mod trainer;

pub use atlas::{AtlasDecomposition, Checkpoint, FrameRole, FrameSet, Layer, PixelTimeCoord, Stage, UvCoord, VideoMeta};
pub use embedding::{EmbeddingBackend, EmbeddingConfig, EmbeddingVector, StubBackend, ViewImage};
pub use error::{Error, Result};
pub use imageops::Rect;
pub use losses::{Ablation, LossRecord, LossTerm, LossWeights};
pub use sampling::{AugmentationConfig, BoundingBox, SamplingConfig, ViewBatch};
pub use textaug::{PrefixBank, TargetTexts, TextConfig};
pub use trainer::{Stylizer, TrainConfig, TrainSettings};
