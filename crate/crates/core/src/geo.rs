//! Geodetic helpers and satellite tile geometry.
//!
//! Distances use a local flat-earth (equirectangular) model: one degree of
//! latitude is [`METERS_PER_DEG_LAT`] meters everywhere and one degree of
//! longitude shrinks with the cosine of the latitude. Tiles are at most a few
//! kilometers wide, so curvature is ignored. Antimeridian-spanning tiles are
//! not supported.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

/// Fractional pixel positions this close to an integer are snapped to it
/// before flooring, so that round-tripping a geotag through degrees does not
/// push it across a pixel boundary.
const PIXEL_SNAP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("non-finite coordinate ({lat}, {lon})")]
    NonFinite { lat: f64, lon: f64 },
    #[error("invalid tile spec: {0}")]
    InvalidTile(String),
    #[error("point ({lat}, {lon}) lies outside the tile footprint")]
    OutOfFootprint { lat: f64, lon: f64 },
    #[error("pixel ({row}, {col}) outside a {size}x{size} tile")]
    PixelOutOfBounds { row: u32, col: u32, size: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A geotag in degrees. Latitude in `[-90, 90]`, longitude in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    /// Validates the latitude and wraps the longitude into `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite { lat, lon });
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        Ok(Self {
            lat,
            lon: wrap_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Moves the point by the given metric offsets using the flat-earth model
    /// evaluated at this point's latitude.
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> Result<Self, GeoError> {
        let (m_lat, m_lon) = meters_per_degree(self.lat)?;
        if m_lon <= 0.0 && east_m != 0.0 {
            return Err(GeoError::InvalidArgument(
                "cannot move east/west at a pole".into(),
            ));
        }
        let dlon = if east_m == 0.0 { 0.0 } else { east_m / m_lon };
        Self::new(self.lat + north_m / m_lat, self.lon + dlon)
    }

    /// (north, east) offset in meters of `other` relative to `self`, evaluated
    /// with the longitude scale at `self`'s latitude.
    pub fn local_offset_m(&self, other: &GeoPoint) -> (f64, f64) {
        let m_lon = METERS_PER_DEG_LAT * self.lat.to_radians().cos();
        let north = (other.lat - self.lat) * METERS_PER_DEG_LAT;
        let east = wrap_lon(other.lon - self.lon) * m_lon;
        (north, east)
    }
}

fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Meters per degree of latitude and longitude at `lat`.
pub fn meters_per_degree(lat: f64) -> Result<(f64, f64), GeoError> {
    if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
        return Err(GeoError::LatitudeOutOfRange(lat));
    }
    let m_lon = if lat.abs() == 90.0 {
        0.0
    } else {
        METERS_PER_DEG_LAT * lat.to_radians().cos()
    };
    Ok((METERS_PER_DEG_LAT, m_lon))
}

/// Symmetric flat-earth distance, with the longitude scale taken at the mean
/// latitude of the two points.
pub fn flat_distance_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let mean_lat = 0.5 * (a.lat + b.lat);
    let north = (b.lat - a.lat) * METERS_PER_DEG_LAT;
    let east = wrap_lon(b.lon - a.lon) * METERS_PER_DEG_LAT * mean_lat.to_radians().cos();
    north.hypot(east)
}

/// A square satellite tile centered on a geotag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub center: GeoPoint,
    pub resolution_m_per_px: f64,
    pub size_px: u32,
    pub patch_px: u32,
}

impl TileSpec {
    pub const DEFAULT_SIZE_PX: u32 = 224;
    pub const DEFAULT_PATCH_PX: u32 = 16;

    pub fn new(
        center: GeoPoint,
        resolution_m_per_px: f64,
        size_px: u32,
        patch_px: u32,
    ) -> Result<Self, GeoError> {
        if !(resolution_m_per_px.is_finite() && resolution_m_per_px > 0.0) {
            return Err(GeoError::InvalidTile(format!(
                "resolution must be positive, got {resolution_m_per_px}"
            )));
        }
        if size_px == 0 || patch_px == 0 {
            return Err(GeoError::InvalidTile("size and patch must be positive".into()));
        }
        if !size_px.is_multiple_of(patch_px) {
            return Err(GeoError::InvalidTile(format!(
                "size {size_px} is not divisible by patch {patch_px}"
            )));
        }
        Ok(Self {
            center,
            resolution_m_per_px,
            size_px,
            patch_px,
        })
    }

    /// NAIP-like defaults: 1 m/px, 224 px, 16 px patches.
    pub fn naip(center: GeoPoint) -> Self {
        Self::new(center, 1.0, Self::DEFAULT_SIZE_PX, Self::DEFAULT_PATCH_PX)
            .expect("default tile spec is valid")
    }

    /// Sentinel-like defaults: 10 m/px, 224 px, 16 px patches.
    pub fn sentinel(center: GeoPoint) -> Self {
        Self::new(center, 10.0, Self::DEFAULT_SIZE_PX, Self::DEFAULT_PATCH_PX)
            .expect("default tile spec is valid")
    }

    pub fn with_center(&self, center: GeoPoint) -> Self {
        Self { center, ..*self }
    }

    /// Patches per side.
    pub fn grid_dim(&self) -> u32 {
        self.size_px / self.patch_px
    }

    pub fn n_patches(&self) -> usize {
        (self.grid_dim() * self.grid_dim()) as usize
    }

    /// Ground extent of one patch in meters.
    pub fn patch_extent_m(&self) -> f64 {
        self.resolution_m_per_px * self.patch_px as f64
    }

    /// Half the tile width in meters.
    pub fn half_extent_m(&self) -> f64 {
        0.5 * self.size_px as f64 * self.resolution_m_per_px
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        geotag_to_pixel(self, p).is_ok()
    }

    /// Metric offset (north, east) of a fractional pixel position from the
    /// tile center.
    pub fn pixel_offset_m(&self, row: f64, col: f64) -> (f64, f64) {
        let half = 0.5 * self.size_px as f64;
        (
            (half - row) * self.resolution_m_per_px,
            (col - half) * self.resolution_m_per_px,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchIndex {
    pub prow: u32,
    pub pcol: u32,
}

impl PatchIndex {
    /// Row-major position within a `grid_dim` x `grid_dim` patch grid.
    pub fn flat(&self, grid_dim: u32) -> usize {
        (self.prow * grid_dim + self.pcol) as usize
    }
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < PIXEL_SNAP {
        r
    } else {
        x
    }
}

/// Continuous (row, col) position of a geotag in the tile's pixel frame.
/// Row grows southward, column grows eastward.
pub fn geotag_to_pixel_f64(tile: &TileSpec, p: &GeoPoint) -> Result<(f64, f64), GeoError> {
    let (m_lat, m_lon) = meters_per_degree(tile.center.lat)?;
    let north = (p.lat - tile.center.lat) * m_lat;
    let east = wrap_lon(p.lon - tile.center.lon) * m_lon;
    let half = 0.5 * tile.size_px as f64;
    Ok((
        half - north / tile.resolution_m_per_px,
        half + east / tile.resolution_m_per_px,
    ))
}

/// Maps a geotag to the pixel containing it. Points on or beyond the
/// footprint boundary are rejected.
pub fn geotag_to_pixel(tile: &TileSpec, p: &GeoPoint) -> Result<PixelCoord, GeoError> {
    let (row, col) = geotag_to_pixel_f64(tile, p)?;
    let (row, col) = (snap(row), snap(col));
    let size = tile.size_px as f64;
    let inside = |x: f64| x > 0.0 && x < size;
    if !(inside(row) && inside(col)) {
        return Err(GeoError::OutOfFootprint {
            lat: p.lat,
            lon: p.lon,
        });
    }
    Ok(PixelCoord {
        row: row.floor() as u32,
        col: col.floor() as u32,
    })
}

/// Geotag of a pixel's center; the inverse of [`geotag_to_pixel`] up to half a
/// pixel.
pub fn pixel_center_to_geo(tile: &TileSpec, px: PixelCoord) -> Result<GeoPoint, GeoError> {
    check_pixel(tile, px)?;
    let (north, east) = tile.pixel_offset_m(px.row as f64 + 0.5, px.col as f64 + 0.5);
    tile.center.offset_m(north, east)
}

fn check_pixel(tile: &TileSpec, px: PixelCoord) -> Result<(), GeoError> {
    if px.row >= tile.size_px || px.col >= tile.size_px {
        return Err(GeoError::PixelOutOfBounds {
            row: px.row,
            col: px.col,
            size: tile.size_px,
        });
    }
    Ok(())
}

pub fn pixel_to_patch(px: PixelCoord, patch_px: u32) -> PatchIndex {
    PatchIndex {
        prow: px.row / patch_px,
        pcol: px.col / patch_px,
    }
}

/// Geotag of the center of a patch.
pub fn patch_center_to_geo(tile: &TileSpec, patch: PatchIndex) -> Result<GeoPoint, GeoError> {
    let g = tile.grid_dim();
    if patch.prow >= g || patch.pcol >= g {
        return Err(GeoError::InvalidArgument(format!(
            "patch ({}, {}) outside a {g}x{g} grid",
            patch.prow, patch.pcol
        )));
    }
    let p = tile.patch_px as f64;
    let (north, east) =
        tile.pixel_offset_m((patch.prow as f64 + 0.5) * p, (patch.pcol as f64 + 0.5) * p);
    tile.center.offset_m(north, east)
}

/// Bounds-checked [`pixel_to_patch`] against a concrete tile.
pub fn pixel_to_patch_checked(tile: &TileSpec, px: PixelCoord) -> Result<PatchIndex, GeoError> {
    check_pixel(tile, px)?;
    Ok(pixel_to_patch(px, tile.patch_px))
}

/// Result of [`sample_tiles`].
#[derive(Debug, Clone, PartialEq)]
pub struct TileSampling {
    pub tiles: Vec<TileSpec>,
    /// For each tile, indices of every input point inside its footprint, ascending.
    pub assignment: Vec<Vec<usize>>,
    /// For each tile, the index of the point that spawned it.
    pub spawners: Vec<usize>,
}

/// Bucketed lookup of tile centers in degree space.
struct CenterIndex {
    cell_deg: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl CenterIndex {
    fn new(radius_m: f64) -> Self {
        Self {
            cell_deg: (radius_m / METERS_PER_DEG_LAT).max(1e-6),
            bins: HashMap::new(),
        }
    }

    fn key(&self, p: &GeoPoint) -> (i64, i64) {
        (
            (p.lat / self.cell_deg).floor() as i64,
            (p.lon / self.cell_deg).floor() as i64,
        )
    }

    fn insert(&mut self, id: usize, p: &GeoPoint) {
        self.bins.entry(self.key(p)).or_default().push(id);
    }

    /// Ids of every entry that may lie within `radius_m` of `p`, in any
    /// order. Conservative: callers apply an exact test afterwards.
    fn candidates(&self, p: &GeoPoint, radius_m: f64, out: &mut Vec<usize>) {
        out.clear();
        let dlat = radius_m / METERS_PER_DEG_LAT;
        let max_abs_lat = (p.lat.abs() + dlat).min(90.0);
        let cos = max_abs_lat.to_radians().cos();
        let dlon = if cos > 1e-9 {
            (radius_m / (METERS_PER_DEG_LAT * cos)).min(360.0)
        } else {
            360.0
        };
        let (r0, c0) = self.key(p);
        let nr = (dlat / self.cell_deg).ceil() as i64 + 1;
        let nc = (dlon / self.cell_deg).ceil() as i64 + 1;
        if ((2 * nr + 1) * (2 * nc + 1)) as usize > self.bins.len() {
            for (&(r, c), ids) in &self.bins {
                if (r - r0).abs() <= nr && (c - c0).abs() <= nc {
                    out.extend_from_slice(ids);
                }
            }
        } else {
            for r in r0 - nr..=r0 + nr {
                for c in c0 - nc..=c0 + nc {
                    if let Some(ids) = self.bins.get(&(r, c)) {
                        out.extend_from_slice(ids);
                    }
                }
            }
        }
    }
}

/// Greedy tile sampling in input order.
///
/// A point spawns a tile centered on itself unless an existing tile center
/// lies closer than `min_sep_px` pixels (converted to meters at the template
/// resolution). Afterwards every point is assigned to every tile whose
/// footprint contains it, so a point may belong to several overlapping tiles.
/// The template's own center is ignored.
pub fn sample_tiles(
    points: &[GeoPoint],
    template: &TileSpec,
    min_sep_px: u32,
) -> TileSampling {
    let min_sep_m = min_sep_px as f64 * template.resolution_m_per_px;
    let reach_m = min_sep_m.max(template.half_extent_m() * std::f64::consts::SQRT_2);
    let mut index = CenterIndex::new(reach_m);
    let mut tiles = Vec::new();
    let mut spawners = Vec::new();
    let mut scratch = Vec::new();

    for (i, p) in points.iter().enumerate() {
        index.candidates(p, min_sep_m, &mut scratch);
        let blocked = scratch
            .iter()
            .any(|&t| flat_distance_m(&tiles[t], p) < min_sep_m);
        if !blocked {
            index.insert(tiles.len(), p);
            tiles.push(*p);
            spawners.push(i);
        }
    }

    let specs: Vec<TileSpec> = tiles.iter().map(|c| template.with_center(*c)).collect();
    let reach = template.half_extent_m() * std::f64::consts::SQRT_2;
    let per_point: Vec<Vec<usize>> = exec::map_slice(points, |p| {
        let mut cand = Vec::new();
        index.candidates(p, reach, &mut cand);
        cand.sort_unstable();
        cand.retain(|&t| specs[t].contains(p));
        cand
    });

    let mut assignment = vec![Vec::new(); specs.len()];
    for (i, owners) in per_point.iter().enumerate() {
        for &t in owners {
            assignment[t].push(i);
        }
    }
    TileSampling {
        tiles: specs,
        assignment,
        spawners,
    }
}

/// Caps each tile's point list at `cap` entries by uniform random subsampling.
///
/// Lists already within the cap are returned unchanged; retained indices keep
/// their original relative order. Each tile draws from its own ChaCha stream
/// so the result depends only on `seed` and the tile position.
pub fn cap_subsample(
    assignment: &[Vec<usize>],
    cap: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, GeoError> {
    if cap == 0 {
        return Err(GeoError::InvalidArgument("cap must be at least 1".into()));
    }
    Ok(exec::map_range(assignment.len(), |t| {
        let pts = &assignment[t];
        if pts.len() <= cap {
            return pts.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut picked = index::sample(&mut rng, pts.len(), cap).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|k| pts[k]).collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn meters_per_degree_examples() {
        assert_eq!(meters_per_degree(0.0).unwrap(), (111_320.0, 111_320.0));
        let (a, b) = meters_per_degree(60.0).unwrap();
        assert_eq!(a, 111_320.0);
        assert!((b - 55_660.0).abs() < 1e-6);
        assert_eq!(meters_per_degree(90.0).unwrap(), (111_320.0, 0.0));
        assert!(matches!(
            meters_per_degree(90.5),
            Err(GeoError::LatitudeOutOfRange(_))
        ));
    }

    #[test]
    fn geopoint_normalizes_longitude() {
        assert_eq!(pt(0.0, 180.0).lon(), -180.0);
        assert_eq!(pt(0.0, -190.0).lon(), 170.0);
        assert_eq!(pt(0.0, 540.0).lon(), -180.0);
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn tile_spec_validation() {
        let c = pt(0.0, 0.0);
        assert!(TileSpec::new(c, 1.0, 224, 15).is_err());
        assert!(TileSpec::new(c, 0.0, 224, 16).is_err());
        let t = TileSpec::naip(c);
        assert_eq!(t.grid_dim(), 14);
        assert_eq!(t.patch_extent_m(), 16.0);
        assert_eq!(TileSpec::sentinel(c).patch_extent_m(), 160.0);
    }

    #[test]
    fn center_maps_to_middle_pixel() {
        let t = TileSpec::naip(pt(40.0, -100.0));
        assert_eq!(
            geotag_to_pixel(&t, &t.center).unwrap(),
            PixelCoord { row: 112, col: 112 }
        );
    }

    #[test]
    fn east_offset_moves_column() {
        let t = TileSpec::naip(pt(40.0, -100.0));
        let p = t.center.offset_m(0.0, 50.0).unwrap();
        assert_eq!(
            geotag_to_pixel(&t, &p).unwrap(),
            PixelCoord { row: 112, col: 162 }
        );
        let p = t.center.offset_m(30.0, 0.0).unwrap();
        assert_eq!(
            geotag_to_pixel(&t, &p).unwrap(),
            PixelCoord { row: 82, col: 112 }
        );
    }

    #[test]
    fn far_point_is_out_of_footprint() {
        let t = TileSpec::naip(pt(40.0, -100.0));
        let p = t.center.offset_m(200.0, 0.0).unwrap();
        assert!(matches!(
            geotag_to_pixel(&t, &p),
            Err(GeoError::OutOfFootprint { .. })
        ));
    }

    #[test]
    fn boundary_points_are_excluded() {
        let t = TileSpec::naip(pt(10.0, 20.0));
        let north_edge = t.center.offset_m(112.0, 0.0).unwrap();
        let west_edge = t.center.offset_m(0.0, -112.0).unwrap();
        assert!(geotag_to_pixel(&t, &north_edge).is_err());
        assert!(geotag_to_pixel(&t, &west_edge).is_err());
        let just_inside = t.center.offset_m(111.5, -111.5).unwrap();
        assert_eq!(
            geotag_to_pixel(&t, &just_inside).unwrap(),
            PixelCoord { row: 0, col: 0 }
        );
    }

    #[test]
    fn pixel_to_patch_examples() {
        let p = |row, col| pixel_to_patch(PixelCoord { row, col }, 16);
        assert_eq!(p(0, 0), PatchIndex { prow: 0, pcol: 0 });
        assert_eq!(p(15, 15), PatchIndex { prow: 0, pcol: 0 });
        assert_eq!(p(16, 0), PatchIndex { prow: 1, pcol: 0 });
        let t = TileSpec::naip(pt(0.0, 0.0));
        assert!(pixel_to_patch_checked(&t, PixelCoord { row: 224, col: 0 }).is_err());
    }

    #[test]
    fn pixel_center_round_trip() {
        let t = TileSpec::new(pt(-33.0, 151.0), 10.0, 448, 16).unwrap();
        for &(row, col) in &[(0, 0), (447, 447), (17, 300), (224, 224)] {
            let px = PixelCoord { row, col };
            let g = pixel_center_to_geo(&t, px).unwrap();
            assert_eq!(geotag_to_pixel(&t, &g).unwrap(), px);
        }
    }

    #[test]
    fn sample_single_point() {
        let s = sample_tiles(&[pt(1.0, 2.0)], &TileSpec::naip(pt(0.0, 0.0)), 112);
        assert_eq!(s.tiles.len(), 1);
        assert_eq!(s.tiles[0].center, pt(1.0, 2.0));
        assert_eq!(s.assignment, vec![vec![0]]);
    }

    #[test]
    fn sample_close_points_share_tile() {
        let a = pt(40.0, -100.0);
        let b = a.offset_m(0.0, 50.0).unwrap();
        let s = sample_tiles(&[a, b], &TileSpec::naip(a), 112);
        assert_eq!(s.tiles.len(), 1);
        assert_eq!(s.assignment, vec![vec![0, 1]]);
    }

    #[test]
    fn sample_far_points_get_own_tiles() {
        let a = pt(40.0, -100.0);
        let b = a.offset_m(300.0, 0.0).unwrap();
        let s = sample_tiles(&[a, b], &TileSpec::naip(a), 112);
        assert_eq!(s.tiles.len(), 2);
        assert_eq!(s.assignment, vec![vec![0], vec![1]]);
    }

    #[test]
    fn overlapping_tiles_share_points() {
        // a and c spawn tiles 150 m apart; b sits inside both footprints.
        let a = pt(40.0, -100.0);
        let b = a.offset_m(0.0, 100.0).unwrap();
        let c = a.offset_m(0.0, 150.0).unwrap();
        let s = sample_tiles(&[a, b, c], &TileSpec::naip(a), 112);
        assert_eq!(s.spawners, vec![0, 2]);
        assert_eq!(s.assignment, vec![vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn cap_examples() {
        let small = vec![(0..10).collect::<Vec<_>>()];
        assert_eq!(cap_subsample(&small, 25, 1).unwrap(), small);

        let big = vec![(100..140).collect::<Vec<_>>()];
        let capped = cap_subsample(&big, 25, 9).unwrap();
        assert_eq!(capped[0].len(), 25);
        assert!(capped[0].iter().all(|i| big[0].contains(i)));
        assert!(capped[0].windows(2).all(|w| w[0] < w[1]));
        assert_eq!(capped, cap_subsample(&big, 25, 9).unwrap());
        assert_ne!(capped, cap_subsample(&big, 25, 10).unwrap());
        assert!(cap_subsample(&big, 0, 1).is_err());
    }
}
