//! Frozen reference encoders backed by embedding fixtures.
//!
//! Ground images and text prompts are never embedded on the fly: a fixture
//! table maps a key (a ground image's `embedding_ref`, or a rendered prompt)
//! to a stored unit vector. Tables are read-only after loading.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::{DecodeError, Reader, Writer};

/// Norm tolerance accepted when checking an embedding is unit length.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Below this norm a vector cannot be normalized.
pub const MIN_NORM: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FrozenError {
    #[error("vector has non-finite components")]
    NonFinite,
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("empty embedding")]
    Empty,
    #[error("no fixture entry for {0:?}")]
    MissingKey(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("prompt ensemble for {label:?} averages to a zero vector")]
    DegenerateMean { label: String },
    #[error("prompt template {0:?} must contain exactly one {{label}} slot")]
    BadTemplate(String),
    #[error("prompt set is empty")]
    NoTemplates,
    #[error("fixture decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A unit-norm vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    /// Normalizes `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self, FrozenError> {
        if values.is_empty() {
            return Err(FrozenError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FrozenError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm < MIN_NORM {
            return Err(FrozenError::ZeroNorm(norm));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &EmbeddingVec) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for EmbeddingVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Prompt templates with a single `{label}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub const SLOT: &'static str = "{label}";

    pub fn new<S: Into<String>>(templates: impl IntoIterator<Item = S>) -> Result<Self, FrozenError> {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(FrozenError::NoTemplates);
        }
        if let Some(bad) = templates.iter().find(|t| t.matches(Self::SLOT).count() != 1) {
            return Err(FrozenError::BadTemplate(bad.clone()));
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render(&self, label: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replace(Self::SLOT, label))
            .collect()
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::new([
            "A photo of a {label}",
            "A photo taken from inside a {label}",
            "I took a photo from a {label}",
        ])
        .expect("default prompts are well formed")
    }
}

/// Fixture-backed lookup table of unit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    dim: usize,
    table: BTreeMap<String, EmbeddingVec>,
}

impl FrozenEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    /// Registers `values` (normalized on insertion) under `key`.
    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) -> Result<(), FrozenError> {
        if values.len() != self.dim {
            return Err(FrozenError::Dim {
                expected: self.dim,
                got: values.len(),
            });
        }
        self.table.insert(key.into(), EmbeddingVec::normalized(values)?);
        Ok(())
    }

    pub fn lookup(&self, key: &str) -> Result<&EmbeddingVec, FrozenError> {
        self.table
            .get(key)
            .ok_or_else(|| FrozenError::MissingKey(key.to_string()))
    }

    /// Ground-image embedding for a fixture reference.
    pub fn embed_ground(&self, embedding_ref: &str) -> Result<EmbeddingVec, FrozenError> {
        self.lookup(embedding_ref).cloned()
    }

    /// Prompt-ensembled text embedding: the mean of every rendered prompt's
    /// embedding, renormalized to unit length.
    pub fn embed_text(&self, label: &str, prompts: &PromptSet) -> Result<EmbeddingVec, FrozenError> {
        let mut sum = vec![0.0; self.dim];
        let rendered = prompts.render(label);
        for prompt in &rendered {
            let e = self.lookup(prompt)?;
            for (s, v) in sum.iter_mut().zip(e.as_slice()) {
                *s += v;
            }
        }
        let n = rendered.len() as f64;
        let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
        match EmbeddingVec::normalized(mean) {
            Err(FrozenError::ZeroNorm(_)) => Err(FrozenError::DegenerateMean {
                label: label.to_string(),
            }),
            other => other,
        }
    }

    /// SHA-256 over the table contents; unchanged as long as the table is.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for (k, v) in &self.table {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for x in v.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Fixture encoding: `count: u32, dim: u32`, then per entry a
    /// u32-length-prefixed UTF-8 key followed by `dim` little-endian f32s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.table.len() as u32);
        w.u32(self.dim as u32);
        for (k, v) in &self.table {
            w.str(k);
            for &x in v.as_slice() {
                w.f32(x as f32);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FrozenError> {
        let mut r = Reader::new(bytes);
        let count = r.count(4)?;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.invalid("embedding dimension is zero").into());
        }
        let mut enc = Self::new(dim);
        for _ in 0..count {
            let key = r.str()?;
            let at = r.offset();
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(r.f32()? as f64);
            }
            enc.insert(key.clone(), values).map_err(|e| DecodeError::Invalid {
                offset: at,
                reason: format!("entry {key:?}: {e}"),
            })?;
        }
        r.expect_end()?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<(), FrozenError> {
        fs::write(path, self.to_bytes()).map_err(|source| FrozenError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FrozenError> {
        let bytes = fs::read(path).map_err(|source| FrozenError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
