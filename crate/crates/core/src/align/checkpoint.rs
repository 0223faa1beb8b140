//! Encoder checkpoints.
//!
//! Layout (little endian): magic `GRCK`, u16 version, u32 feature dim,
//! u32 hidden dim, u32 embed dim, u32 patch count, u64 parameter count, the
//! f64 parameters, then a u32 count of provenance entries, each a
//! length-prefixed key and value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::encoder::SatEncoderParams;
use super::AlignError;
use crate::binio::{Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GRCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SatEncoderParams,
    pub provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: SatEncoderParams, provenance: BTreeMap<String, String>) -> Self {
        Self { params, provenance }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        for dim in [p.feature_dim(), p.hidden_dim(), p.embed_dim(), p.n_patches()] {
            w.u32(dim as u32);
        }
        w.u64(p.len() as u64);
        for &v in p.as_slice() {
            w.f64(v);
        }
        w.u32(self.provenance.len() as u32);
        for (k, v) in &self.provenance {
            w.str(k);
            w.str(v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AlignError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let (f, h, d, n) = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let at = r.offset();
        let count = r.u64()? as usize;
        if count != SatEncoderParams::param_count(f, h, d, n) {
            return Err(crate::binio::DecodeError::Invalid {
                offset: at,
                reason: format!("{count} parameters do not match dims {f}x{h}x{d}x{n}"),
            }
            .into());
        }
        if count.saturating_mul(8) > r.remaining() {
            return Err(r.invalid("parameter payload is truncated").into());
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64()?);
        }
        let params = SatEncoderParams::from_flat(f, h, d, n, data)?;
        let entries = r.count(8)?;
        let mut provenance = BTreeMap::new();
        for _ in 0..entries {
            let k = r.str()?;
            let v = r.str()?;
            provenance.insert(k, v);
        }
        r.expect_end()?;
        Ok(Self { params, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<(), AlignError> {
        fs::write(path, self.to_bytes()).map_err(|source| AlignError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AlignError> {
        let bytes = fs::read(path).map_err(|source| AlignError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
