//! Georeferenced rasters: per-cell feature vectors (satellite snapshots) and
//! per-cell class labels (ground truth).
//!
//! A raster is anchored at its north-west corner. Cell `(r, c)` covers the
//! metric square `[r, r+1) x [c, c+1)` cells south and east of the origin,
//! measured with the flat-earth model at the origin latitude.
//!
//! File layout (little endian): magic `GRRS`, u16 version, u8 kind
//! (0 = f32 features, 1 = u16 classes), f64 origin lat, f64 origin lon,
//! f64 cell meters, u32 rows, u32 cols, u32 channels, then row-major values.

use std::fs;
use std::path::Path;

use super::CorpusError;
use crate::binio::{Reader, Writer};
use crate::geo::{GeoPoint, TileSpec};

pub const RASTER_MAGIC: &[u8; 4] = b"GRRS";
pub const RASTER_VERSION: u16 = 1;
const KIND_FEATURES: u8 = 0;
const KIND_CLASSES: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterGeometry {
    pub origin: GeoPoint,
    pub cell_m: f64,
    pub rows: u32,
    pub cols: u32,
}

impl RasterGeometry {
    pub fn new(origin: GeoPoint, cell_m: f64, rows: u32, cols: u32) -> Result<Self, CorpusError> {
        if !(cell_m.is_finite() && cell_m > 0.0) || rows == 0 || cols == 0 {
            return Err(CorpusError::InvalidArgument(format!(
                "raster needs positive cell size and dims, got {cell_m} m, {rows}x{cols}"
            )));
        }
        Ok(Self {
            origin,
            cell_m,
            rows,
            cols,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    /// Row-major index of the cell containing `p`, if any.
    pub fn cell_of(&self, p: &GeoPoint) -> Option<usize> {
        let (north, east) = self.origin.local_offset_m(p);
        let r = (-north / self.cell_m).floor();
        let c = (east / self.cell_m).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some(r as usize * self.cols as usize + c as usize)
    }

    /// Geotag of a cell center.
    pub fn cell_center(&self, row: u32, col: u32) -> Result<GeoPoint, CorpusError> {
        Ok(self.origin.offset_m(
            -(row as f64 + 0.5) * self.cell_m,
            (col as f64 + 0.5) * self.cell_m,
        )?)
    }

    /// Whether all four corners of the tile footprint fall inside the raster.
    pub fn covers(&self, tile: &TileSpec) -> bool {
        let h = tile.half_extent_m();
        [(-h, -h), (-h, h), (h, -h), (h, h)].iter().all(|&(n, e)| {
            tile.center
                .offset_m(n, e)
                .map(|p| self.cell_of(&p).is_some())
                .unwrap_or(false)
        })
    }

    fn write_header(&self, w: &mut Writer, kind: u8, channels: u32) {
        w.bytes(RASTER_MAGIC);
        w.u16(RASTER_VERSION);
        w.u8(kind);
        w.f64(self.origin.lat());
        w.f64(self.origin.lon());
        w.f64(self.cell_m);
        w.u32(self.rows);
        w.u32(self.cols);
        w.u32(channels);
    }

    fn read_header(r: &mut Reader, kind: u8) -> Result<(Self, u32), CorpusError> {
        r.magic(RASTER_MAGIC)?;
        r.version(RASTER_VERSION)?;
        let found = r.u8()?;
        if found != kind {
            return Err(r.invalid(format!("raster kind {found}, expected {kind}")).into());
        }
        let at = r.offset();
        let (lat, lon, cell_m) = (r.f64()?, r.f64()?, r.f64()?);
        let (rows, cols, channels) = (r.u32()?, r.u32()?, r.u32()?);
        let origin = GeoPoint::new(lat, lon).map_err(|e| crate::binio::DecodeError::Invalid {
            offset: at,
            reason: e.to_string(),
        })?;
        let geom = Self::new(origin, cell_m, rows, cols).map_err(|e| {
            crate::binio::DecodeError::Invalid {
                offset: at,
                reason: e.to_string(),
            }
        })?;
        if channels == 0 {
            return Err(r.invalid("raster has zero channels").into());
        }
        Ok((geom, channels))
    }
}

/// One satellite snapshot: an `F`-dimensional feature vector per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRaster {
    pub geometry: RasterGeometry,
    feature_dim: usize,
    data: Vec<f32>,
}

impl FeatureRaster {
    pub fn new(geometry: RasterGeometry, feature_dim: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if feature_dim == 0 || data.len() != geometry.n_cells() * feature_dim {
            return Err(CorpusError::InvalidArgument(format!(
                "feature raster holds {} values, expected {} cells x {feature_dim}",
                data.len(),
                geometry.n_cells()
            )));
        }
        Ok(Self {
            geometry,
            feature_dim,
            data,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn cell(&self, index: usize) -> &[f32] {
        &self.data[index * self.feature_dim..(index + 1) * self.feature_dim]
    }

    pub fn feature_at(&self, p: &GeoPoint) -> Option<&[f32]> {
        self.geometry.cell_of(p).map(|i| self.cell(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.geometry
            .write_header(&mut w, KIND_FEATURES, self.feature_dim as u32);
        for &v in &self.data {
            w.f32(v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        let mut r = Reader::new(bytes);
        let (geometry, channels) = RasterGeometry::read_header(&mut r, KIND_FEATURES)?;
        let n = geometry.n_cells() * channels as usize;
        if r.remaining() != n * 4 {
            return Err(r
                .invalid(format!("expected {} payload bytes, found {}", n * 4, r.remaining()))
                .into());
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        Self::new(geometry, channels as usize, data)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_bytes()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Ground-truth class per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub geometry: RasterGeometry,
    classes: Vec<u16>,
}

impl ClassMap {
    pub fn new(geometry: RasterGeometry, classes: Vec<u16>) -> Result<Self, CorpusError> {
        if classes.len() != geometry.n_cells() {
            return Err(CorpusError::InvalidArgument(format!(
                "class map holds {} cells, expected {}",
                classes.len(),
                geometry.n_cells()
            )));
        }
        Ok(Self { geometry, classes })
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn class_at(&self, p: &GeoPoint) -> Option<u16> {
        self.geometry.cell_of(p).map(|i| self.classes[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.geometry.write_header(&mut w, KIND_CLASSES, 1);
        for &v in &self.classes {
            w.u16(v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        let mut r = Reader::new(bytes);
        let (geometry, channels) = RasterGeometry::read_header(&mut r, KIND_CLASSES)?;
        if channels != 1 {
            return Err(r.invalid("class map must have one channel").into());
        }
        let n = geometry.n_cells();
        if r.remaining() != n * 2 {
            return Err(r
                .invalid(format!("expected {} payload bytes, found {}", n * 2, r.remaining()))
                .into());
        }
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            classes.push(r.u16()?);
        }
        Self::new(geometry, classes)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_bytes()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> RasterGeometry {
        RasterGeometry::new(GeoPoint::new(40.0, -100.0).unwrap(), 10.0, 3, 4).unwrap()
    }

    #[test]
    fn cell_lookup_follows_row_south_col_east() {
        let g = geom();
        assert_eq!(g.cell_of(&g.cell_center(0, 0).unwrap()), Some(0));
        assert_eq!(g.cell_of(&g.cell_center(2, 3).unwrap()), Some(11));
        assert_eq!(g.cell_of(&g.origin.offset_m(5.0, 5.0).unwrap()), None);
        assert_eq!(g.cell_of(&g.origin.offset_m(-5.0, 45.0).unwrap()), None);
    }

    #[test]
    fn coverage_requires_whole_footprint() {
        let g = RasterGeometry::new(GeoPoint::new(40.0, -100.0).unwrap(), 16.0, 100, 100).unwrap();
        let inside = TileSpec::naip(g.origin.offset_m(-800.0, 800.0).unwrap());
        let straddling = TileSpec::naip(g.origin.offset_m(-50.0, 800.0).unwrap());
        assert!(g.covers(&inside));
        assert!(!g.covers(&straddling));
    }

    #[test]
    fn rasters_round_trip() {
        let f = FeatureRaster::new(geom(), 2, (0..24).map(|v| v as f32 * 0.5).collect()).unwrap();
        assert_eq!(FeatureRaster::from_bytes(&f.to_bytes()).unwrap(), f);
        let c = ClassMap::new(geom(), (0..12).collect()).unwrap();
        assert_eq!(ClassMap::from_bytes(&c.to_bytes()).unwrap(), c);
        assert!(ClassMap::from_bytes(&f.to_bytes()).is_err());
        let bytes = f.to_bytes();
        assert!(FeatureRaster::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
