//! Dataset assembly: ground/satellite records, pairing, batching and
//! persistence, plus the synthetic world used for desk-scale verification.

mod container;
pub mod manifest;
mod pairs;
pub mod raster;
pub mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::DecodeError;
use crate::frozen::FrozenError;
use crate::geo::{GeoError, GeoPoint, PixelCoord, TileSpec};

pub use container::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use manifest::SnapshotRecord;
pub use pairs::{build_pairs, make_batches, select_snapshot, BuildParams, PairBatch};
pub use raster::{ClassMap, FeatureRaster, RasterGeometry};
pub use synth::{EvalTile, SynthConfig, SynthWorld};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unresolvable embedding_ref for ground images: {}", .0.join(", "))]
    UnresolvedEmbedding(Vec<String>),
    #[error("no satellite snapshot covers tile {tile} (spawned by ground image {ground})")]
    NoSnapshot { tile: String, ground: String },
    #[error("snapshot candidate list is empty")]
    NoCandidates,
    #[error("feature blob {0:?} not found")]
    MissingBlob(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("referential integrity: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Frozen(#[from] FrozenError),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One geotagged ground-level photo, referenced into the frozen fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundImageRecord {
    pub id: String,
    pub geo: GeoPoint,
    pub timestamp: i64,
    pub embedding_ref: String,
}

/// A satellite tile with a row-major grid of per-patch raw feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SatTileRecord {
    pub id: String,
    pub spec: TileSpec,
    pub timestamp: i64,
    pub channels: u32,
    feature_dim: usize,
    features: Vec<f32>,
}

impl SatTileRecord {
    pub fn new(
        id: impl Into<String>,
        spec: TileSpec,
        timestamp: i64,
        channels: u32,
        feature_dim: usize,
        features: Vec<f32>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        if feature_dim == 0 || channels == 0 {
            return Err(CorpusError::InvalidArgument(format!(
                "tile {id}: feature_dim and channels must be positive"
            )));
        }
        let want = spec.n_patches() * feature_dim;
        if features.len() != want {
            return Err(CorpusError::InvalidArgument(format!(
                "tile {id}: {} feature values, expected {want}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::InvalidArgument(format!(
                "tile {id}: non-finite feature value"
            )));
        }
        Ok(Self {
            id,
            spec,
            timestamp,
            channels,
            feature_dim,
            features,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_patches(&self) -> usize {
        self.spec.n_patches()
    }

    /// All patch features, row-major by patch then feature.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn patch_feature(&self, patch: usize) -> &[f32] {
        &self.features[patch * self.feature_dim..(patch + 1) * self.feature_dim]
    }
}

/// Settings the dataset was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub resolution_m_per_px: f64,
    pub size_px: u32,
    pub patch_px: u32,
    pub cap: u32,
    pub min_sep_px: u32,
}

/// Satellite tiles, ground images and the tile-to-ground assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub tiles: Vec<SatTileRecord>,
    pub grounds: Vec<GroundImageRecord>,
    /// For each tile, indices into `grounds`.
    pub assignments: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

impl PairedDataset {
    pub fn n_pairs(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn max_grounds_per_tile(&self) -> usize {
        self.assignments.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Checks that every assignment resolves, every tile has at least one
    /// ground image, and each ground image lies inside its tile.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.assignments.len() != self.tiles.len() {
            return Err(CorpusError::Integrity(format!(
                "{} assignment lists for {} tiles",
                self.assignments.len(),
                self.tiles.len()
            )));
        }
        for (t, (tile, list)) in self.tiles.iter().zip(&self.assignments).enumerate() {
            if list.is_empty() {
                return Err(CorpusError::Integrity(format!("tile {t} has no ground images")));
            }
            for &g in list {
                let ground = self.grounds.get(g).ok_or_else(|| {
                    CorpusError::Integrity(format!("tile {t} references missing ground {g}"))
                })?;
                crate::geo::geotag_to_pixel(&tile.spec, &ground.geo).map_err(|_| {
                    CorpusError::Integrity(format!(
                        "ground {} lies outside tile {}",
                        ground.id, tile.id
                    ))
                })?;
            }
        }
        Ok(())
    }

    /// A dataset restricted to the given tiles (in the given order).
    pub fn subset(&self, tiles: &[usize]) -> PairedDataset {
        PairedDataset {
            tiles: tiles.iter().map(|&t| self.tiles[t].clone()).collect(),
            grounds: self.grounds.clone(),
            assignments: tiles.iter().map(|&t| self.assignments[t].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Pixel of every assigned ground image within its tile.
    pub fn pixels(&self, tile: usize) -> Result<Vec<PixelCoord>, CorpusError> {
        let spec = &self.tiles[tile].spec;
        self.assignments[tile]
            .iter()
            .map(|&g| Ok(crate::geo::geotag_to_pixel(spec, &self.grounds[g].geo)?))
            .collect()
    }
}
