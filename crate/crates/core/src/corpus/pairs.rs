//! Ground/satellite pairing and batch construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::raster::FeatureRaster;
use super::{CorpusError, GroundImageRecord, PairedDataset, Provenance, SatTileRecord, SnapshotRecord};
use crate::exec;
use crate::frozen::FrozenEncoder;
use crate::geo::{self, PatchIndex, PixelCoord, TileSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    /// Resolution, size and patch size of every tile; the center is ignored.
    pub template: TileSpec,
    pub cap: usize,
    pub min_sep_px: u32,
    pub seed: u64,
    pub channels: u32,
}

/// Index of the candidate timestamp closest to `target`; ties go to the
/// earlier timestamp, then to the lower index.
pub fn select_snapshot(candidates: &[i64], target: i64) -> Result<usize, CorpusError> {
    candidates
        .iter()
        .enumerate()
        .min_by_key(|&(i, &c)| ((c as i128 - target as i128).abs(), c, i))
        .map(|(i, _)| i)
        .ok_or(CorpusError::NoCandidates)
}

/// Samples tiles around the ground images, caps each tile's ground list, picks
/// the temporally closest covering snapshot for every tile and samples its
/// features at the patch centers.
///
/// `blobs` maps each snapshot's `blob_ref` to its feature raster. The target
/// time of a tile is the timestamp of the ground image that spawned it.
pub fn build_pairs(
    grounds: &[GroundImageRecord],
    snapshots: &[SnapshotRecord],
    blobs: &BTreeMap<String, FeatureRaster>,
    ground_encoder: &FrozenEncoder,
    params: &BuildParams,
) -> Result<PairedDataset, CorpusError> {
    let unresolved: Vec<String> = grounds
        .iter()
        .filter(|g| !ground_encoder.contains(&g.embedding_ref))
        .map(|g| g.id.clone())
        .collect();
    if !unresolved.is_empty() {
        return Err(CorpusError::UnresolvedEmbedding(unresolved));
    }
    if grounds.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let rasters: Vec<&FeatureRaster> = snapshots
        .iter()
        .map(|s| {
            blobs
                .get(&s.blob_ref)
                .ok_or_else(|| CorpusError::MissingBlob(s.blob_ref.clone()))
        })
        .collect::<Result<_, _>>()?;
    if let Some(r) = rasters.windows(2).find(|w| w[0].feature_dim() != w[1].feature_dim()) {
        return Err(CorpusError::InvalidArgument(format!(
            "snapshots disagree on feature dim ({} vs {})",
            r[0].feature_dim(),
            r[1].feature_dim()
        )));
    }

    let points: Vec<_> = grounds.iter().map(|g| g.geo).collect();
    let sampling = geo::sample_tiles(&points, &params.template, params.min_sep_px);
    let assignment = geo::cap_subsample(&sampling.assignment, params.cap, params.seed)?;

    let kept: Vec<usize> = (0..sampling.tiles.len())
        .filter(|&t| !assignment[t].is_empty())
        .collect();
    let tiles = exec::try_map_range(kept.len(), |k| {
        let t = kept[k];
        let spec = sampling.tiles[t];
        let spawner = &grounds[sampling.spawners[t]];
        let covering: Vec<usize> = (0..snapshots.len())
            .filter(|&s| rasters[s].geometry.covers(&spec))
            .collect();
        let stamps: Vec<i64> = covering.iter().map(|&s| snapshots[s].timestamp).collect();
        let chosen = match select_snapshot(&stamps, spawner.timestamp) {
            Ok(c) => covering[c],
            Err(_) => {
                return Err(CorpusError::NoSnapshot {
                    tile: format!("{k}"),
                    ground: spawner.id.clone(),
                })
            }
        };
        let features = sample_features(&spec, rasters[chosen])?;
        SatTileRecord::new(
            format!("tile-{k:06}"),
            spec,
            snapshots[chosen].timestamp,
            params.channels,
            rasters[chosen].feature_dim(),
            features,
        )
    })?;
    if tiles.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }

    let ds = PairedDataset {
        tiles,
        grounds: grounds.to_vec(),
        assignments: kept.iter().map(|&t| assignment[t].clone()).collect(),
        provenance: Provenance {
            seed: params.seed,
            resolution_m_per_px: params.template.resolution_m_per_px,
            size_px: params.template.size_px,
            patch_px: params.template.patch_px,
            cap: params.cap as u32,
            min_sep_px: params.min_sep_px,
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Raster features at each patch center, row-major.
pub fn sample_features(spec: &TileSpec, raster: &FeatureRaster) -> Result<Vec<f32>, CorpusError> {
    let g = spec.grid_dim();
    let mut out = Vec::with_capacity(spec.n_patches() * raster.feature_dim());
    for prow in 0..g {
        for pcol in 0..g {
            let p = geo::patch_center_to_geo(spec, PatchIndex { prow, pcol })?;
            let f = raster.feature_at(&p).ok_or_else(|| {
                CorpusError::InvalidArgument(format!(
                    "patch ({prow}, {pcol}) center falls outside the snapshot raster"
                ))
            })?;
            out.extend_from_slice(f);
        }
    }
    Ok(out)
}

/// A training batch borrowing from a [`PairedDataset`].
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    /// Positions of the tiles within the dataset.
    pub tile_indices: Vec<usize>,
    pub tiles: Vec<&'a SatTileRecord>,
    pub grounds: Vec<Vec<&'a GroundImageRecord>>,
    /// Pixel of each ground image within its tile, parallel to `grounds`.
    pub pixels: Vec<Vec<PixelCoord>>,
}

impl PairBatch<'_> {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// One epoch of batches: a seeded permutation of the tiles cut into chunks of
/// `batch_size`. A short final chunk is kept only if it has at least two tiles.
pub fn make_batches(
    ds: &PairedDataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PairBatch<'_>>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.tiles.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size && chunk.len() < 2 {
            continue;
        }
        let mut batch = PairBatch {
            tile_indices: chunk.to_vec(),
            tiles: Vec::with_capacity(chunk.len()),
            grounds: Vec::with_capacity(chunk.len()),
            pixels: Vec::with_capacity(chunk.len()),
        };
        for &t in chunk {
            batch.tiles.push(&ds.tiles[t]);
            batch
                .grounds
                .push(ds.assignments[t].iter().map(|&g| &ds.grounds[g]).collect());
            batch.pixels.push(ds.pixels(t)?);
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::raster::RasterGeometry;
    use crate::geo::GeoPoint;

    #[test]
    fn select_snapshot_examples() {
        assert_eq!(select_snapshot(&[100], 999).unwrap(), 0);
        assert_eq!(select_snapshot(&[100, 200], 160).unwrap(), 1);
        assert_eq!(select_snapshot(&[100, 200], 150).unwrap(), 0);
        assert_eq!(select_snapshot(&[200, 100], 150).unwrap(), 1);
        assert!(matches!(select_snapshot(&[], 0), Err(CorpusError::NoCandidates)));
    }

    fn world() -> (BTreeMap<String, FeatureRaster>, FrozenEncoder, GeoPoint) {
        let origin = GeoPoint::new(40.0, -100.0).unwrap();
        let geom = RasterGeometry::new(origin, 16.0, 64, 64).unwrap();
        let data = (0..64 * 64 * 2).map(|i| (i % 7) as f32).collect();
        let mut blobs = BTreeMap::new();
        blobs.insert("a".to_string(), FeatureRaster::new(geom, 2, data).unwrap());
        let mut enc = FrozenEncoder::new(2);
        enc.insert("0", vec![1.0, 0.0]).unwrap();
        enc.insert("1", vec![0.0, 1.0]).unwrap();
        (blobs, enc, origin.offset_m(-512.0, 512.0).unwrap())
    }

    fn ground(id: &str, geo: GeoPoint, r: &str) -> GroundImageRecord {
        GroundImageRecord {
            id: id.into(),
            geo,
            timestamp: 0,
            embedding_ref: r.into(),
        }
    }

    fn params() -> BuildParams {
        BuildParams {
            template: TileSpec::naip(GeoPoint::new(0.0, 0.0).unwrap()),
            cap: 25,
            min_sep_px: 112,
            seed: 1,
            channels: 3,
        }
    }

    fn snaps() -> Vec<SnapshotRecord> {
        vec![SnapshotRecord {
            region_id: "r".into(),
            timestamp: 0,
            blob_ref: "a".into(),
        }]
    }

    #[test]
    fn single_pair_builds_one_tile() {
        let (blobs, enc, c) = world();
        let ds = build_pairs(&[ground("g", c, "0")], &snaps(), &blobs, &enc, &params()).unwrap();
        assert_eq!(ds.tiles.len(), 1);
        assert_eq!(ds.n_pairs(), 1);
        assert_eq!(ds.tiles[0].n_patches(), 196);
    }

    #[test]
    fn close_grounds_share_a_tile() {
        let (blobs, enc, c) = world();
        let g = vec![ground("a", c, "0"), ground("b", c.offset_m(0.0, 50.0).unwrap(), "1")];
        let ds = build_pairs(&g, &snaps(), &blobs, &enc, &params()).unwrap();
        assert_eq!(ds.tiles.len(), 1);
        assert_eq!(ds.n_pairs(), 2);
    }

    #[test]
    fn build_errors() {
        let (blobs, enc, c) = world();
        let err = build_pairs(&[ground("x", c, "9")], &snaps(), &blobs, &enc, &params()).unwrap_err();
        assert!(matches!(err, CorpusError::UnresolvedEmbedding(ref ids) if ids == &["x".to_string()]));
        let err = build_pairs(&[ground("g", c, "0")], &[], &blobs, &enc, &params()).unwrap_err();
        assert!(matches!(err, CorpusError::NoSnapshot { .. }), "{err}");
        let far = GeoPoint::new(10.0, 10.0).unwrap();
        assert!(build_pairs(&[ground("g", far, "0")], &snaps(), &blobs, &enc, &params()).is_err());
    }

    fn dataset(n_tiles: usize) -> PairedDataset {
        let (blobs, enc, c) = world();
        let g: Vec<_> = (0..n_tiles)
            .map(|i| ground(&format!("g{i}"), c, "0"))
            .collect();
        let mut ds = build_pairs(&g[..1], &snaps(), &blobs, &enc, &params()).unwrap();
        let tile = ds.tiles[0].clone();
        ds.grounds = g;
        ds.tiles = vec![tile; n_tiles];
        ds.assignments = (0..n_tiles).map(|i| vec![i]).collect();
        ds
    }

    #[test]
    fn batches_cover_every_tile_once() {
        let ds = dataset(10);
        let b = make_batches(&ds, 5, 3).unwrap();
        assert_eq!(b.len(), 2);
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.tile_indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_final_batch_of_one_is_dropped() {
        let ds = dataset(11);
        let b = make_batches(&ds, 5, 3).unwrap();
        assert_eq!(b.iter().map(PairBatch::len).collect::<Vec<_>>(), vec![5, 5]);
        let ds = dataset(12);
        let b = make_batches(&ds, 5, 3).unwrap();
        assert_eq!(b.iter().map(PairBatch::len).collect::<Vec<_>>(), vec![5, 5, 2]);
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let ds = dataset(12);
        let a: Vec<_> = make_batches(&ds, 4, 9).unwrap().into_iter().map(|b| b.tile_indices).collect();
        let b: Vec<_> = make_batches(&ds, 4, 9).unwrap().into_iter().map(|b| b.tile_indices).collect();
        assert_eq!(a, b);
        assert!(make_batches(&ds, 0, 9).is_err());
    }
}
