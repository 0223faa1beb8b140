//! Binary dataset container.
//!
//! Layout (little endian): magic `GRFT`, u16 version, then four sections, each
//! prefixed by its u64 byte length: tiles, grounds, assignments, provenance.
//! Strings are u32-length-prefixed UTF-8.

use std::fs;
use std::path::Path;

use super::{CorpusError, GroundImageRecord, PairedDataset, Provenance, SatTileRecord};
use crate::binio::{DecodeError, Reader, Writer};
use crate::geo::{GeoPoint, TileSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"GRFT";
pub const DATASET_VERSION: u16 = 1;

fn encode_tiles(tiles: &[SatTileRecord]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(tiles.len() as u32);
    for t in tiles {
        w.str(&t.id);
        w.f64(t.spec.center.lat());
        w.f64(t.spec.center.lon());
        w.f64(t.spec.resolution_m_per_px);
        w.u32(t.spec.size_px);
        w.u32(t.spec.patch_px);
        w.i64(t.timestamp);
        w.u32(t.channels);
        w.u32(t.feature_dim() as u32);
        for &v in t.features() {
            w.f32(v);
        }
    }
    w.into_bytes()
}

fn encode_grounds(grounds: &[GroundImageRecord]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(grounds.len() as u32);
    for g in grounds {
        w.str(&g.id);
        w.f64(g.geo.lat());
        w.f64(g.geo.lon());
        w.i64(g.timestamp);
        w.str(&g.embedding_ref);
    }
    w.into_bytes()
}

fn encode_assignments(assignments: &[Vec<usize>]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(assignments.len() as u32);
    for list in assignments {
        w.u32(list.len() as u32);
        for &g in list {
            w.u32(g as u32);
        }
    }
    w.into_bytes()
}

fn encode_provenance(p: &Provenance) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(p.seed);
    w.f64(p.resolution_m_per_px);
    w.u32(p.size_px);
    w.u32(p.patch_px);
    w.u32(p.cap);
    w.u32(p.min_sep_px);
    w.into_bytes()
}

pub fn dataset_to_bytes(ds: &PairedDataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.section(&encode_tiles(&ds.tiles));
    w.section(&encode_grounds(&ds.grounds));
    w.section(&encode_assignments(&ds.assignments));
    w.section(&encode_provenance(&ds.provenance));
    w.into_bytes()
}

fn invalid_at(offset: usize, reason: impl std::fmt::Display) -> CorpusError {
    CorpusError::Decode(DecodeError::Invalid {
        offset,
        reason: reason.to_string(),
    })
}

fn decode_point(r: &mut Reader) -> Result<GeoPoint, CorpusError> {
    let at = r.offset();
    let (lat, lon) = (r.f64()?, r.f64()?);
    GeoPoint::new(lat, lon).map_err(|e| invalid_at(at, e))
}

fn decode_tiles(mut r: Reader) -> Result<Vec<SatTileRecord>, CorpusError> {
    let n = r.count(4)?;
    let mut tiles = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let id = r.str()?;
        let center = decode_point(&mut r)?;
        let res = r.f64()?;
        let (size, patch) = (r.u32()?, r.u32()?);
        let spec = TileSpec::new(center, res, size, patch).map_err(|e| invalid_at(at, e))?;
        let timestamp = r.i64()?;
        let channels = r.u32()?;
        let fdim = r.u32()? as usize;
        let n_values = spec.n_patches().saturating_mul(fdim);
        if n_values.saturating_mul(4) > r.remaining() {
            return Err(DecodeError::Truncated {
                offset: r.offset(),
                needed: n_values * 4 - r.remaining(),
            }
            .into());
        }
        let mut features = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            features.push(r.f32()?);
        }
        tiles.push(
            SatTileRecord::new(id, spec, timestamp, channels, fdim, features)
                .map_err(|e| invalid_at(at, e))?,
        );
    }
    r.expect_end()?;
    Ok(tiles)
}

fn decode_grounds(mut r: Reader) -> Result<Vec<GroundImageRecord>, CorpusError> {
    let n = r.count(4)?;
    let mut grounds = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.str()?;
        let geo = decode_point(&mut r)?;
        let timestamp = r.i64()?;
        let embedding_ref = r.str()?;
        grounds.push(GroundImageRecord {
            id,
            geo,
            timestamp,
            embedding_ref,
        });
    }
    r.expect_end()?;
    Ok(grounds)
}

fn decode_assignments(mut r: Reader) -> Result<Vec<Vec<usize>>, CorpusError> {
    let n = r.count(4)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.count(4)?;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            list.push(r.u32()? as usize);
        }
        out.push(list);
    }
    r.expect_end()?;
    Ok(out)
}

fn decode_provenance(mut r: Reader) -> Result<Provenance, CorpusError> {
    let p = Provenance {
        seed: r.u64()?,
        resolution_m_per_px: r.f64()?,
        size_px: r.u32()?,
        patch_px: r.u32()?,
        cap: r.u32()?,
        min_sep_px: r.u32()?,
    };
    r.expect_end()?;
    Ok(p)
}

/// Decodes a container and checks referential integrity.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<PairedDataset, CorpusError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let tiles = decode_tiles(r.section()?)?;
    let grounds = decode_grounds(r.section()?)?;
    let assignments = decode_assignments(r.section()?)?;
    let provenance = decode_provenance(r.section()?)?;
    r.expect_end()?;
    let ds = PairedDataset {
        tiles,
        grounds,
        assignments,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<(), CorpusError> {
    fs::write(path, dataset_to_bytes(ds)).map_err(|e| CorpusError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    dataset_from_bytes(&bytes)
}
