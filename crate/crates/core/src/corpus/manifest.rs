//! Line-oriented manifests.
//!
//! Ground manifest: `id lat lon timestamp embedding_ref` per line.
//! Snapshot manifest: `tile_region_id timestamp feature_blob_ref` per line.
//! Fields are whitespace separated; blank lines and lines starting with `#`
//! are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CorpusError, GroundImageRecord};
use crate::geo::GeoPoint;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotRecord {
    pub region_id: String,
    pub timestamp: i64,
    pub blob_ref: String,
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split_whitespace().collect()))
        }
    })
}

fn field<T: std::str::FromStr>(
    source: &str,
    line: usize,
    name: &str,
    raw: &str,
) -> Result<T, CorpusError> {
    raw.parse().map_err(|_| CorpusError::Manifest {
        path: source.to_string(),
        line,
        reason: format!("bad {name} {raw:?}"),
    })
}

/// Parses a ground manifest; `source` is only used in error messages.
pub fn parse_ground_manifest(text: &str, source: &str) -> Result<Vec<GroundImageRecord>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, f) in records(text) {
        if f.len() != 5 {
            return Err(CorpusError::Manifest {
                path: source.to_string(),
                line,
                reason: format!("expected 5 fields, found {}", f.len()),
            });
        }
        let lat: f64 = field(source, line, "lat", f[1])?;
        let lon: f64 = field(source, line, "lon", f[2])?;
        let geo = GeoPoint::new(lat, lon).map_err(|e| CorpusError::Manifest {
            path: source.to_string(),
            line,
            reason: e.to_string(),
        })?;
        if !seen.insert(f[0]) {
            return Err(CorpusError::DuplicateId(f[0].to_string()));
        }
        out.push(GroundImageRecord {
            id: f[0].to_string(),
            geo,
            timestamp: field(source, line, "timestamp", f[3])?,
            embedding_ref: f[4].to_string(),
        });
    }
    Ok(out)
}

pub fn parse_snapshot_manifest(text: &str, source: &str) -> Result<Vec<SnapshotRecord>, CorpusError> {
    records(text)
        .map(|(line, f)| {
            if f.len() != 3 {
                return Err(CorpusError::Manifest {
                    path: source.to_string(),
                    line,
                    reason: format!("expected 3 fields, found {}", f.len()),
                });
            }
            Ok(SnapshotRecord {
                region_id: f[0].to_string(),
                timestamp: field(source, line, "timestamp", f[1])?,
                blob_ref: f[2].to_string(),
            })
        })
        .collect()
}

pub fn format_ground_manifest(records: &[GroundImageRecord]) -> String {
    let mut s = String::from("# id lat lon timestamp embedding_ref\n");
    for r in records {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            r.id,
            r.geo.lat(),
            r.geo.lon(),
            r.timestamp,
            r.embedding_ref
        );
    }
    s
}

pub fn format_snapshot_manifest(records: &[SnapshotRecord]) -> String {
    let mut s = String::from("# tile_region_id timestamp feature_blob_ref\n");
    for r in records {
        let _ = writeln!(s, "{} {} {}", r.region_id, r.timestamp, r.blob_ref);
    }
    s
}

pub fn read_ground_manifest(path: &Path) -> Result<Vec<GroundImageRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_ground_manifest(&text, &path.display().to_string())
}

pub fn read_snapshot_manifest(path: &Path) -> Result<Vec<SnapshotRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_snapshot_manifest(&text, &path.display().to_string())
}
