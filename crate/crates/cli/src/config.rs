//! Run configuration: a TOML file, `--set section.key=value` overrides, then
//! dedicated flags, in increasing precedence.

use std::fs;
use std::path::{Path, PathBuf};

use graft_core::align::{LossConfig, LossVariant, TrainConfig};
use graft_core::corpus::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Offset added to the run seed for held-out tiles, so they never share a
/// stream with the training world.
pub const EVAL_SEED_OFFSET: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: SynthConfig,
    pub build: BuildSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub map: MapSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildSection {
    /// Maximum ground images kept per tile.
    pub cap: usize,
    pub min_sep_px: u32,
}

impl Default for BuildSection {
    fn default() -> Self {
        Self {
            cap: 25,
            min_sep_px: 112,
        }
    }
}

/// Training settings; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: LossVariant,
    pub tau: f64,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss: t.loss.variant,
            tau: t.loss.tau,
            hidden_dim: t.hidden_dim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_frac: t.warmup_frac,
            weight_decay: t.weight_decay,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let loss = LossConfig::new(self.tau, self.loss).map_err(|e| CliError::Config(e.to_string()))?;
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(CliError::Config("batch_size and hidden_dim must be positive".into()));
        }
        Ok(TrainConfig {
            loss,
            hidden_dim: self.hidden_dim,
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Number of held-out tiles.
    pub tiles: usize,
    /// Segmentation logit upsampling factor; 1 scores at patch resolution.
    pub upsample: usize,
    /// Held-out tile seed; defaults to the run seed plus [`EVAL_SEED_OFFSET`].
    pub seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tiles: 500,
            upsample: 1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub rows: u32,
    pub cols: u32,
}

impl Default for MapSection {
    fn default() -> Self {
        Self { rows: 32, cols: 32 }
    }
}

/// Artifact locations; unset entries live under the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub world: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `file` (if any) and applies `--set` overrides on top.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    /// Fills every defaulted path and seed so the snapshot is explicit.
    pub fn resolve(&mut self, out: &Path) {
        let p = &mut self.paths;
        p.world.get_or_insert_with(|| out.join("world"));
        p.dataset.get_or_insert_with(|| out.join("pairs.grft"));
        p.checkpoint.get_or_insert_with(|| out.join("model.grck"));
        self.eval
            .seed
            .get_or_insert(self.seed.wrapping_add(EVAL_SEED_OFFSET));
    }

    pub fn world_dir(&self) -> &Path {
        self.paths.world.as_deref().expect("resolved")
    }

    pub fn dataset_path(&self) -> &Path {
        self.paths.dataset.as_deref().expect("resolved")
    }

    pub fn checkpoint_path(&self) -> &Path {
        self.paths.checkpoint.as_deref().expect("resolved")
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {assignment:?}: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set {assignment:?}: empty key segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, sections) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {assignment:?}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
