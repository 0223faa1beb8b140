//! Aligning a trainable satellite-tile encoder with a frozen ground-image/text
//! embedding space.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`geo`]: flat-earth tile geometry, geotag to pixel mapping, tile sampling.
//! - [`corpus`]: manifests, ground/satellite pairing, batching, persistence and
//!   the synthetic Voronoi world used for verification.
//! - [`frozen`]: fixture-backed frozen ground and text encoders, prompt ensembling.
//! - [`align`]: multi-positive contrastive losses with analytic gradients, the
//!   patch encoder, AdamW with warmup/cosine schedule, and the training loop.
//! - [`eval`]: zero-shot classification, ranking metrics, segmentation and
//!   density maps.
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every reduction
//! is performed in index order so results do not depend on the thread count.

pub mod align;
pub mod binio;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod frozen;
pub mod geo;

pub use align::{LossConfig, LossVariant, SatEncoderParams, TrainConfig};
pub use corpus::{GroundImageRecord, PairBatch, PairedDataset, SatTileRecord};
pub use frozen::{EmbeddingVec, FrozenEncoder, PromptSet};
pub use geo::{GeoPoint, PatchIndex, PixelCoord, TileSpec};
