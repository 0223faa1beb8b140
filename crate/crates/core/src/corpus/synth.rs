//! Synthetic Voronoi world with known class structure.
//!
//! `K` class seeds partition a square region. Each satellite snapshot stores,
//! per raster cell, `one_hot(class) + N(0, sigma)` in `F` dimensions; each
//! ground image embedding is `normalize(e_k + N(0, sigma))` in `D` dimensions
//! where `e_k` is the k-th standard basis vector. The text fixture maps every
//! rendered prompt of label `k` to `e_k`.
//!
//! Raster cells are one patch wide and the raster extends one tile width past
//! the region on every side, so any tile centered inside the region is fully
//! covered.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{self, SnapshotRecord};
use super::pairs::{build_pairs, sample_features, BuildParams};
use super::raster::{ClassMap, FeatureRaster, RasterGeometry};
use super::{CorpusError, GroundImageRecord, PairedDataset, SatTileRecord};
use crate::frozen::{EmbeddingVec, FrozenEncoder, PromptSet};
use crate::geo::{self, GeoPoint, PatchIndex, TileSpec};

const DEFAULT_LABELS: [&str; 8] = [
    "forest",
    "water",
    "farmland",
    "residential",
    "industrial",
    "grassland",
    "wetland",
    "barren",
];

/// First snapshot time; later snapshots follow at [`SNAPSHOT_SPACING_S`].
const BASE_TIMESTAMP: i64 = 1_600_000_000;
const SNAPSHOT_SPACING_S: i64 = 180 * 86_400;

// RNG stream ids; each purpose draws from its own ChaCha stream.
const STREAM_SEEDS: u64 = 0;
const STREAM_GROUNDS: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_SNAPSHOT: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub extent_km: f64,
    pub n_ground: usize,
    pub noise_sigma: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub n_snapshots: usize,
    pub resolution_m_per_px: f64,
    pub size_px: u32,
    pub patch_px: u32,
    pub channels: u32,
    /// Lloyd relaxation passes applied to the uniformly drawn class seeds.
    pub lloyd_iters: usize,
    /// Class names; empty means the built-in names.
    pub labels: Vec<String>,
    /// Prompt templates; empty means the default prompt set.
    pub prompts: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            embed_dim: 16,
            feature_dim: 16,
            extent_km: 10.0,
            n_ground: 3500,
            noise_sigma: 0.1,
            center_lat: 40.0,
            center_lon: -100.0,
            n_snapshots: 2,
            resolution_m_per_px: 1.0,
            size_px: 224,
            patch_px: 16,
            channels: 3,
            lloyd_iters: 4,
            labels: Vec::new(),
            prompts: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidArgument(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes > u16::MAX as usize {
            return bad(format!("too many classes: {}", self.classes));
        }
        if self.embed_dim < self.classes || self.feature_dim < self.classes {
            return bad(format!(
                "embed_dim ({}) and feature_dim ({}) must be at least the class count ({})",
                self.embed_dim, self.feature_dim, self.classes
            ));
        }
        if !(self.extent_km.is_finite() && self.extent_km > 0.0) {
            return bad(format!("degenerate extent {} km", self.extent_km));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("bad noise_sigma {}", self.noise_sigma));
        }
        if self.n_snapshots == 0 {
            return bad("need at least one snapshot".into());
        }
        if !self.labels.is_empty() && self.labels.len() != self.classes {
            return bad(format!(
                "{} labels given for {} classes",
                self.labels.len(),
                self.classes
            ));
        }
        self.tile_template()?;
        self.prompt_set()?;
        Ok(())
    }

    pub fn tile_template(&self) -> Result<TileSpec, CorpusError> {
        let center = GeoPoint::new(self.center_lat, self.center_lon)?;
        Ok(TileSpec::new(
            center,
            self.resolution_m_per_px,
            self.size_px,
            self.patch_px,
        )?)
    }

    pub fn prompt_set(&self) -> Result<PromptSet, CorpusError> {
        if self.prompts.is_empty() {
            Ok(PromptSet::default())
        } else {
            Ok(PromptSet::new(self.prompts.iter().cloned())?)
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        if !self.labels.is_empty() {
            return self.labels.clone();
        }
        (0..self.classes)
            .map(|k| match DEFAULT_LABELS.get(k) {
                Some(name) => name.to_string(),
                None => format!("class_{k}"),
            })
            .collect()
    }
}

/// A held-out tile with fresh feature noise and its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTile {
    pub tile: SatTileRecord,
    /// Class of every patch, row-major.
    pub patch_labels: Vec<u16>,
    /// Majority patch class (lowest index on ties).
    pub label: u16,
    /// Which classes occur anywhere in the tile.
    pub present: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldMeta {
    seed: u64,
    config: SynthConfig,
    /// Class seed positions in meters (east, south) from the raster origin.
    class_seeds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub seed: u64,
    pub labels: Vec<String>,
    pub prompts: PromptSet,
    pub class_seeds: Vec<(f64, f64)>,
    pub class_map: ClassMap,
    pub snapshots: Vec<SnapshotRecord>,
    pub blobs: BTreeMap<String, FeatureRaster>,
    pub grounds: Vec<GroundImageRecord>,
    pub ground_encoder: FrozenEncoder,
    pub text_encoder: FrozenEncoder,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn nearest(seeds: &[(f64, f64)], x: f64, y: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &(sx, sy)) in seeds.iter().enumerate() {
        let d = (sx - x).powi(2) + (sy - y).powi(2);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Moves every seed to the centroid of its Voronoi cell, estimated on a
/// regular grid over `[lo, lo + extent]^2`.
fn lloyd(seeds: &mut [(f64, f64)], lo: f64, extent: f64, iters: usize) {
    const GRID: usize = 128;
    let step = extent / GRID as f64;
    for _ in 0..iters {
        let mut acc = vec![(0.0, 0.0, 0usize); seeds.len()];
        for i in 0..GRID {
            for j in 0..GRID {
                let (x, y) = (lo + (j as f64 + 0.5) * step, lo + (i as f64 + 0.5) * step);
                let a = &mut acc[nearest(seeds, x, y)];
                a.0 += x;
                a.1 += y;
                a.2 += 1;
            }
        }
        for (s, a) in seeds.iter_mut().zip(&acc) {
            if a.2 > 0 {
                *s = (a.0 / a.2 as f64, a.1 / a.2 as f64);
            }
        }
    }
}

fn class_counts(labels: &[u16], k_count: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k_count];
    for &k in labels {
        counts[k as usize] += 1;
    }
    counts
}

fn majority(counts: &[usize]) -> u16 {
    (0..counts.len()).fold(0, |best, k| if counts[k] > counts[best] { k } else { best }) as u16
}

fn basis(k: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

impl SynthWorld {
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self, CorpusError> {
        config.validate()?;
        let template = config.tile_template()?;
        let pad = template.half_extent_m() * 2.0;
        let extent = config.extent_km * 1000.0;
        let cell_m = template.patch_extent_m();
        let side_cells = ((extent + 2.0 * pad) / cell_m).ceil() as u32;
        let half_total = 0.5 * side_cells as f64 * cell_m;
        let origin = template.center.offset_m(half_total, -half_total)?;
        let geometry = RasterGeometry::new(origin, cell_m, side_cells, side_cells)?;

        // Region occupies [pad, pad + extent] in both metric axes, centered.
        let lo = half_total - 0.5 * extent;
        let mut r = rng(seed, STREAM_SEEDS);
        let mut class_seeds: Vec<(f64, f64)> = (0..config.classes)
            .map(|_| {
                (
                    lo + r.random::<f64>() * extent,
                    lo + r.random::<f64>() * extent,
                )
            })
            .collect();
        lloyd(&mut class_seeds, lo, extent, config.lloyd_iters);

        let n = side_cells as usize;
        let mut classes = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let (x, y) = ((col as f64 + 0.5) * cell_m, (row as f64 + 0.5) * cell_m);
                classes.push(nearest(&class_seeds, x, y) as u16);
            }
        }
        let class_map = ClassMap::new(geometry, classes)?;

        let f = config.feature_dim;
        let sigma = config.noise_sigma;
        let mut snapshots = Vec::with_capacity(config.n_snapshots);
        let mut blobs = BTreeMap::new();
        for s in 0..config.n_snapshots {
            let mut r = rng(seed, STREAM_SNAPSHOT + s as u64);
            let mut data = Vec::with_capacity(n * n * f);
            for &k in class_map.classes() {
                for d in 0..f {
                    let noise: f64 = r.sample(StandardNormal);
                    let base = if d == k as usize { 1.0 } else { 0.0 };
                    data.push((base + sigma * noise) as f32);
                }
            }
            let blob_ref = format!("snapshot_{s}.grr");
            blobs.insert(blob_ref.clone(), FeatureRaster::new(geometry, f, data)?);
            snapshots.push(SnapshotRecord {
                region_id: "region-0".into(),
                timestamp: BASE_TIMESTAMP + s as i64 * SNAPSHOT_SPACING_S,
                blob_ref,
            });
        }

        let d = config.embed_dim;
        let span = config.n_snapshots as i64 * SNAPSHOT_SPACING_S;
        let mut r = rng(seed, STREAM_GROUNDS);
        let mut grounds = Vec::with_capacity(config.n_ground);
        let mut ground_encoder = FrozenEncoder::new(d);
        for i in 0..config.n_ground {
            let x = lo + r.random::<f64>() * extent;
            let y = lo + r.random::<f64>() * extent;
            let geo = origin.offset_m(-y, x)?;
            let k = class_map.class_at(&geo).ok_or_else(|| {
                CorpusError::InvalidArgument("ground image fell outside the class map".into())
            })? as usize;
            let mut e = basis(k, d);
            for v in e.iter_mut() {
                let noise: f64 = r.sample(StandardNormal);
                *v += sigma * noise;
            }
            let key = i.to_string();
            ground_encoder.insert(key.clone(), e)?;
            grounds.push(GroundImageRecord {
                id: format!("g{i:06}"),
                geo,
                timestamp: BASE_TIMESTAMP + r.random_range(0..span),
                embedding_ref: key,
            });
        }

        let labels = config.label_names();
        let prompts = config.prompt_set()?;
        let mut text_encoder = FrozenEncoder::new(d);
        for (k, label) in labels.iter().enumerate() {
            for prompt in prompts.render(label) {
                text_encoder.insert(prompt, basis(k, d))?;
            }
        }
        // Fixtures are stored in single precision; pass them through that
        // encoding so a generated world equals the one read back from disk.
        let ground_encoder = FrozenEncoder::from_bytes(&ground_encoder.to_bytes())?;
        let text_encoder = FrozenEncoder::from_bytes(&text_encoder.to_bytes())?;

        Ok(Self {
            // Labels and prompts are stored resolved.
            config: SynthConfig {
                labels: labels.clone(),
                prompts: prompts.templates().to_vec(),
                ..config.clone()
            },
            seed,
            labels,
            prompts,
            class_seeds,
            class_map,
            snapshots,
            blobs,
            grounds,
            ground_encoder,
            text_encoder,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn build_params(&self, cap: usize, min_sep_px: u32, seed: u64) -> Result<BuildParams, CorpusError> {
        Ok(BuildParams {
            template: self.config.tile_template()?,
            cap,
            min_sep_px,
            seed,
            channels: self.config.channels,
        })
    }

    /// Pairs the world's ground images with its snapshots.
    pub fn build_dataset(&self, cap: usize, min_sep_px: u32, seed: u64) -> Result<PairedDataset, CorpusError> {
        build_pairs(
            &self.grounds,
            &self.snapshots,
            &self.blobs,
            &self.ground_encoder,
            &self.build_params(cap, min_sep_px, seed)?,
        )
    }

    /// Prompt-ensembled text embedding of every class label, in class order.
    pub fn class_embeddings(&self) -> Result<Vec<EmbeddingVec>, CorpusError> {
        self.labels
            .iter()
            .map(|l| Ok(self.text_encoder.embed_text(l, &self.prompts)?))
            .collect()
    }

    /// Ground-truth class of every patch of a tile, row-major.
    pub fn patch_labels(&self, spec: &TileSpec) -> Result<Vec<u16>, CorpusError> {
        let g = spec.grid_dim();
        let mut out = Vec::with_capacity(spec.n_patches());
        for prow in 0..g {
            for pcol in 0..g {
                let p = geo::patch_center_to_geo(spec, PatchIndex { prow, pcol })?;
                out.push(self.class_map.class_at(&p).ok_or_else(|| {
                    CorpusError::InvalidArgument("patch center outside the class map".into())
                })?);
            }
        }
        Ok(out)
    }

    fn region_origin_offset(&self) -> f64 {
        let g = &self.class_map.geometry;
        0.5 * (g.rows as f64 * g.cell_m - self.config.extent_km * 1000.0)
    }

    /// Majority patch class of a tile, lowest index on ties.
    pub fn tile_label(&self, spec: &TileSpec) -> Result<u16, CorpusError> {
        let labels = self.patch_labels(spec)?;
        Ok(majority(&class_counts(&labels, self.n_classes())))
    }

    /// `n` tiles centered uniformly at random inside the region, with feature
    /// noise drawn independently of every snapshot.
    pub fn eval_tiles(&self, n: usize, seed: u64) -> Result<Vec<EvalTile>, CorpusError> {
        let template = self.config.tile_template()?;
        let extent = self.config.extent_km * 1000.0;
        let lo = self.region_origin_offset();
        let origin = self.class_map.geometry.origin;
        let f = self.config.feature_dim;
        let k_count = self.n_classes();
        let mut r = rng(seed, STREAM_EVAL);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = lo + r.random::<f64>() * extent;
            let y = lo + r.random::<f64>() * extent;
            let spec = template.with_center(origin.offset_m(-y, x)?);
            let patch_labels = self.patch_labels(&spec)?;
            let mut features = Vec::with_capacity(patch_labels.len() * f);
            for &k in &patch_labels {
                for d in 0..f {
                    let noise: f64 = r.sample(StandardNormal);
                    let base = if d == k as usize { 1.0 } else { 0.0 };
                    features.push((base + self.config.noise_sigma * noise) as f32);
                }
            }
            let counts = class_counts(&patch_labels, k_count);
            let label = majority(&counts);
            let tile = SatTileRecord::new(
                format!("eval-{i:06}"),
                spec,
                BASE_TIMESTAMP,
                self.config.channels,
                f,
                features,
            )?;
            out.push(EvalTile {
                tile,
                patch_labels,
                label,
                present: counts.iter().map(|&c| c > 0).collect(),
            });
        }
        Ok(out)
    }

    /// A `rows` x `cols` grid of tiles tiling the region, sampled from the
    /// latest snapshot. The returned geometry describes the grid cells.
    pub fn region_tiles(&self, rows: u32, cols: u32) -> Result<(RasterGeometry, Vec<SatTileRecord>), CorpusError> {
        if rows == 0 || cols == 0 {
            return Err(CorpusError::InvalidArgument("region grid must be non-empty".into()));
        }
        let template = self.config.tile_template()?;
        let extent = self.config.extent_km * 1000.0;
        let lo = self.region_origin_offset();
        let origin = self.class_map.geometry.origin;
        let cell_m = extent / rows.max(cols) as f64;
        let grid_origin = origin.offset_m(-lo, lo)?;
        let geometry = RasterGeometry::new(grid_origin, cell_m, rows, cols)?;
        let latest = self
            .snapshots
            .iter()
            .max_by_key(|s| s.timestamp)
            .ok_or(CorpusError::NoCandidates)?;
        let raster = &self.blobs[&latest.blob_ref];
        let mut tiles = Vec::with_capacity((rows * cols) as usize);
        for row in 0..rows {
            for col in 0..cols {
                let spec = template.with_center(geometry.cell_center(row, col)?);
                tiles.push(SatTileRecord::new(
                    format!("cell-{row}-{col}"),
                    spec,
                    latest.timestamp,
                    self.config.channels,
                    raster.feature_dim(),
                    sample_features(&spec, raster)?,
                )?);
            }
        }
        Ok((geometry, tiles))
    }

    /// Writes the world as plain files: manifests, snapshot rasters, the class
    /// map, both embedding fixtures and a `world.json` description.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| CorpusError::io(&p, e))
        };
        let meta = WorldMeta {
            seed: self.seed,
            config: self.config.clone(),
            class_seeds: self.class_seeds.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| CorpusError::InvalidArgument(e.to_string()))?;
        write(WORLD_FILE, json.as_bytes())?;
        write(GROUND_MANIFEST, manifest::format_ground_manifest(&self.grounds).as_bytes())?;
        write(
            SNAPSHOT_MANIFEST,
            manifest::format_snapshot_manifest(&self.snapshots).as_bytes(),
        )?;
        for (name, raster) in &self.blobs {
            write(name, &raster.to_bytes())?;
        }
        write(CLASS_MAP, &self.class_map.to_bytes())?;
        write(GROUND_FIXTURE, &self.ground_encoder.to_bytes())?;
        write(TEXT_FIXTURE, &self.text_encoder.to_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let p = dir.join(WORLD_FILE);
        let json = fs::read_to_string(&p).map_err(|e| CorpusError::io(&p, e))?;
        let meta: WorldMeta = serde_json::from_str(&json).map_err(|e| CorpusError::Manifest {
            path: p.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        let grounds = manifest::read_ground_manifest(&dir.join(GROUND_MANIFEST))?;
        let snapshots = manifest::read_snapshot_manifest(&dir.join(SNAPSHOT_MANIFEST))?;
        let blobs = load_blobs(dir, &snapshots)?;
        let class_map = ClassMap::load(&dir.join(CLASS_MAP))?;
        let ground_encoder = FrozenEncoder::load(&dir.join(GROUND_FIXTURE))?;
        let text_encoder = FrozenEncoder::load(&dir.join(TEXT_FIXTURE))?;
        let config = meta.config;
        config.validate()?;
        Ok(Self {
            labels: config.label_names(),
            prompts: config.prompt_set()?,
            config,
            seed: meta.seed,
            class_seeds: meta.class_seeds,
            class_map,
            snapshots,
            blobs,
            grounds,
            ground_encoder,
            text_encoder,
        })
    }
}

pub const WORLD_FILE: &str = "world.json";
pub const GROUND_MANIFEST: &str = "ground_manifest.txt";
pub const SNAPSHOT_MANIFEST: &str = "snapshot_manifest.txt";
pub const CLASS_MAP: &str = "class_map.grr";
pub const GROUND_FIXTURE: &str = "ground_fixture.bin";
pub const TEXT_FIXTURE: &str = "text_fixture.bin";

/// Loads every raster referenced by a snapshot manifest, resolving blob
/// references relative to `dir`.
pub fn load_blobs(dir: &Path, snapshots: &[SnapshotRecord]) -> Result<BTreeMap<String, FeatureRaster>, CorpusError> {
    let mut blobs = BTreeMap::new();
    for s in snapshots {
        if blobs.contains_key(&s.blob_ref) {
            continue;
        }
        let path = dir.join(&s.blob_ref);
        if !path.is_file() {
            return Err(CorpusError::MissingBlob(s.blob_ref.clone()));
        }
        blobs.insert(s.blob_ref.clone(), FeatureRaster::load(&path)?);
    }
    Ok(blobs)
}
