//! Satellite encoder training: losses, encoder, optimizer and training loop.

mod checkpoint;
mod encoder;
pub mod loss;
mod optim;
mod train;

use thiserror::Error;

use crate::binio::DecodeError;
use crate::frozen::FrozenError;

pub use checkpoint::Checkpoint;
pub use encoder::{EncoderOutput, ForwardCache, SatEncoderParams};
pub use loss::{
    image_level_loss, image_loss, loss_avg_rep, loss_l2, loss_sum_prob, pixel_loss, GroundGroup, LossConfig,
    LossGrad, LossVariant, PixelLossGrad,
};
pub use optim::{lr_at, AdamW, AdamWConfig, TrainSchedule};
pub use train::{
    batch_loss_and_grad, encode_tiles, init_params, train, train_step, TrainConfig, TrainHistory,
};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("embedding {index} has norm {norm}, expected unit length")]
    NonUnit { index: usize, norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("batch has no tiles")]
    EmptyBatch,
    #[error("{anchors} anchors but {groups} ground groups")]
    GroupMismatch { anchors: usize, groups: usize },
    #[error("ground group is empty")]
    EmptyGroup,
    #[error("mean ground embedding of tile {tile} has near-zero norm")]
    DegenerateMean { tile: usize },
    #[error("pixel of ground {ground} in tile {tile} falls outside the patch grid")]
    PixelOutOfGrid { tile: usize, ground: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("unknown loss variant {0:?}")]
    UnknownVariant(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("encoder output has zero or non-finite norm: {0}")]
    DegenerateOutput(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("training diverged at step {step}: non-finite {what}")]
    Divergence { step: usize, what: &'static str },
    #[error(transparent)]
    Frozen(#[from] FrozenError),
    #[error("checkpoint decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
