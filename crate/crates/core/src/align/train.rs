//! Training loop: batched forward, selected loss, backprop through the
//! encoder, AdamW update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{EncoderOutput, SatEncoderParams};
use super::loss::{image_level_loss, pixel_loss, GroundGroup, LossConfig};
use super::optim::{lr_at, AdamW, AdamWConfig, TrainSchedule};
use super::AlignError;
use crate::corpus::{make_batches, PairBatch, PairedDataset, SatTileRecord};
use crate::exec;
use crate::frozen::{hex, FrozenEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Desk-scale default 1e-3. Fine-tuning a pretrained backbone would call
    /// for something like 1e-5 to 5e-5 instead.
    pub peak_lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            hidden_dim: 32,
            epochs: 10,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Result<TrainSchedule, AlignError> {
        let total = self.epochs * steps_per_epoch;
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(AlignError::InvalidSchedule(format!(
                "warmup_frac {} outside [0, 1]",
                self.warmup_frac
            )));
        }
        let warmup = ((self.warmup_frac * total as f64).round() as usize).clamp(1, total.max(1));
        TrainSchedule::new(
            self.peak_lr,
            warmup,
            total,
            self.weight_decay,
            self.epochs,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub provenance: BTreeMap<String, String>,
}

impl TrainHistory {
    /// One `epoch loss` line per epoch.
    pub fn to_text(&self) -> String {
        self.epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| format!("{} {l:.17e}\n", e + 1))
            .collect()
    }
}

/// Encodes every tile, in order.
pub fn encode_tiles(
    params: &SatEncoderParams,
    tiles: &[&SatTileRecord],
) -> Result<Vec<EncoderOutput>, AlignError> {
    exec::try_map_range(tiles.len(), |i| params.forward(tiles[i]))
}

fn ground_groups(batch: &PairBatch, frozen: &FrozenEncoder) -> Result<Vec<GroundGroup>, AlignError> {
    batch
        .grounds
        .iter()
        .map(|gs| {
            let embs = gs
                .iter()
                .map(|g| frozen.embed_ground(&g.embedding_ref))
                .collect::<Result<Vec<_>, _>>()?;
            GroundGroup::new(embs)
        })
        .collect()
}

/// Loss and its gradient with respect to every encoder parameter.
pub fn batch_loss_and_grad(
    params: &SatEncoderParams,
    batch: &PairBatch,
    frozen: &FrozenEncoder,
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>), AlignError> {
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let groups = ground_groups(batch, frozen)?;
    let passes = exec::try_map_range(batch.len(), |i| params.forward_cached(batch.tiles[i]))?;

    let (value, per_tile) = if loss.variant.is_pixel_level() {
        let spec = &batch.tiles[0].spec;
        if let Some(t) = batch.tiles.iter().find(|t| t.spec.grid_dim() != spec.grid_dim()) {
            return Err(AlignError::Shape(format!("tile {} has a different patch grid", t.id)));
        }
        let patch_embs: Vec<_> = passes.iter().map(|(o, _)| &o.patch_embs[..]).collect();
        let lg = pixel_loss(
            &patch_embs,
            spec.grid_dim(),
            spec.patch_px,
            &batch.pixels,
            &groups,
            loss.tau,
        )?;
        let grads = exec::map_range(batch.len(), |i| {
            let mut g = vec![0.0; params.len()];
            params.backward(&passes[i].1, Some(&lg.grad[i]), None, &mut g);
            g
        });
        (lg.value, grads)
    } else {
        let anchors: Vec<_> = passes.iter().map(|(o, _)| &o.image_emb).collect();
        let lg = image_level_loss(loss, &anchors, &groups)?;
        let grads = exec::map_range(batch.len(), |i| {
            let mut g = vec![0.0; params.len()];
            params.backward(&passes[i].1, None, Some(&lg.grad[i]), &mut g);
            g
        });
        (lg.value, grads)
    };

    let mut grad = vec![0.0; params.len()];
    for g in &per_tile {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((value, grad))
}

/// One optimizer step at `lr_at(step)`. Returns the batch loss before the
/// update.
pub fn train_step(
    params: &mut SatEncoderParams,
    opt: &mut AdamW,
    batch: &PairBatch,
    frozen: &FrozenEncoder,
    loss: &LossConfig,
    sched: &TrainSchedule,
    step: usize,
) -> Result<f64, AlignError> {
    let (value, grad) = match batch_loss_and_grad(params, batch, frozen, loss) {
        // Past the first update a blown-up output means the parameters ran away.
        Err(AlignError::DegenerateOutput(_)) if opt.steps_taken() > 0 => {
            return Err(AlignError::Divergence { step, what: "encoder output" })
        }
        r => r?,
    };
    if !value.is_finite() {
        return Err(AlignError::Divergence { step, what: "loss" });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AlignError::Divergence { step, what: "gradient" });
    }
    opt.step(params.as_mut_slice(), &grad, lr_at(step, sched));
    if params.as_slice().iter().any(|p| !p.is_finite()) {
        return Err(AlignError::Divergence { step, what: "parameters" });
    }
    Ok(value)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fresh encoder parameters sized for `ds` and `frozen`.
pub fn init_params(
    ds: &PairedDataset,
    frozen: &FrozenEncoder,
    cfg: &TrainConfig,
) -> Result<SatEncoderParams, AlignError> {
    let first = ds.tiles.first().ok_or(AlignError::EmptyBatch)?;
    Ok(SatEncoderParams::init(
        first.feature_dim(),
        cfg.hidden_dim,
        frozen.dim(),
        first.n_patches(),
        cfg.seed,
    ))
}

/// Trains a freshly initialized encoder on `ds` for `cfg.epochs` epochs.
pub fn train(
    ds: &PairedDataset,
    frozen: &FrozenEncoder,
    cfg: &TrainConfig,
) -> Result<(SatEncoderParams, TrainHistory), AlignError> {
    let mut params = init_params(ds, frozen, cfg)?;
    let mut history = TrainHistory::default();
    let prov = &mut history.provenance;
    prov.insert("seed".into(), cfg.seed.to_string());
    prov.insert("config_hash".into(), cfg.hash());
    prov.insert("loss".into(), cfg.loss.variant.name().into());
    prov.insert("tau".into(), cfg.loss.tau.to_string());
    prov.insert("epochs".into(), cfg.epochs.to_string());
    prov.insert("tiles".into(), ds.tiles.len().to_string());
    prov.insert("frozen_fingerprint".into(), frozen.fingerprint());
    if cfg.epochs == 0 {
        return Ok((params, history));
    }

    let steps_per_epoch = make_batches(ds, cfg.batch_size, epoch_seed(cfg.seed, 0))
        .map_err(|e| AlignError::Shape(e.to_string()))?
        .len();
    if steps_per_epoch == 0 {
        return Err(AlignError::EmptyBatch);
    }
    let sched = cfg.schedule(steps_per_epoch)?;
    let mut opt = AdamW::new(
        params.len(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(ds, cfg.batch_size, epoch_seed(cfg.seed, epoch))
            .map_err(|e| AlignError::Shape(e.to_string()))?;
        let mut total = 0.0;
        for batch in &batches {
            step += 1;
            total += train_step(&mut params, &mut opt, batch, frozen, &cfg.loss, &sched, step)?;
        }
        let mean = total / batches.len() as f64;
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        history.epoch_losses.push(mean);
    }
    Ok((params, history))
}
