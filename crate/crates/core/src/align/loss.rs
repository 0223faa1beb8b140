//! Multi-positive contrastive losses and their ablation variants.
//!
//! Every loss takes satellite-side anchors (unit vectors) and, per tile, the
//! group of frozen ground embeddings that fall inside it. Values and analytic
//! gradients with respect to the anchors are returned together. Softmaxes use
//! a max-shifted log-sum-exp, and per-tile terms are summed in tile order so
//! results are reproducible bit-for-bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AlignError;
use crate::exec;
use crate::frozen::{dot, l2_norm, EmbeddingVec, MIN_NORM, UNIT_NORM_TOL};
use crate::geo::PixelCoord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Multi-positive contrastive loss on the pooled tile embedding.
    Image,
    /// Same form, anchored on the patch containing each ground image.
    Pixel,
    /// Negative log of the mean positive probability.
    SumProb,
    /// Single-positive contrastive loss against normalized mean ground embeddings.
    AvgRep,
    /// Squared distance to every ground embedding; no negatives.
    L2,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Image,
        LossVariant::Pixel,
        LossVariant::SumProb,
        LossVariant::AvgRep,
        LossVariant::L2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Image => "image",
            LossVariant::Pixel => "pixel",
            LossVariant::SumProb => "sum_prob",
            LossVariant::AvgRep => "avg_rep",
            LossVariant::L2 => "l2",
        }
    }

    pub fn is_pixel_level(&self) -> bool {
        matches!(self, LossVariant::Pixel)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "image" | "image_default" => LossVariant::Image,
            "pixel" | "pixel_default" => LossVariant::Pixel,
            "sum_prob" => LossVariant::SumProb,
            "avg_rep" => LossVariant::AvgRep,
            "l2" => LossVariant::L2,
            other => return Err(AlignError::UnknownVariant(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub variant: LossVariant,
}

impl LossConfig {
    pub const DEFAULT_TAU: f64 = 0.07;

    pub fn new(tau: f64, variant: LossVariant) -> Result<Self, AlignError> {
        check_tau(tau)?;
        Ok(Self { tau, variant })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: Self::DEFAULT_TAU,
            variant: LossVariant::Image,
        }
    }
}

/// The frozen ground embeddings that belong to one satellite tile.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundGroup {
    embeddings: Vec<EmbeddingVec>,
    mean: Vec<f64>,
}

impl GroundGroup {
    pub fn new(embeddings: Vec<EmbeddingVec>) -> Result<Self, AlignError> {
        let first = embeddings.first().ok_or(AlignError::EmptyGroup)?;
        let dim = first.dim();
        let mut sum = vec![0.0; dim];
        for e in &embeddings {
            if e.dim() != dim {
                return Err(AlignError::Dim {
                    expected: dim,
                    got: e.dim(),
                });
            }
            for (s, v) in sum.iter_mut().zip(e.as_slice()) {
                *s += v;
            }
        }
        let n = embeddings.len() as f64;
        let mean = sum.into_iter().map(|s| s / n).collect();
        Ok(Self { embeddings, mean })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn embeddings(&self) -> &[EmbeddingVec] {
        &self.embeddings
    }

    /// Unnormalized arithmetic mean of the group.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

/// Loss value with the gradient for each anchor (one per tile).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

/// Pixel-level loss value with a gradient for every patch of every tile.
/// Patches that contain no ground image get an all-zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossGrad {
    pub value: f64,
    pub grad: Vec<Vec<Vec<f64>>>,
}

fn check_tau(tau: f64) -> Result<(), AlignError> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(AlignError::InvalidTau(tau))
    }
}

fn check_anchor(index: usize, v: &[f64], dim: usize) -> Result<(), AlignError> {
    if v.len() != dim {
        return Err(AlignError::Dim {
            expected: dim,
            got: v.len(),
        });
    }
    let norm = l2_norm(v);
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(AlignError::NonUnit { index, norm });
    }
    Ok(())
}

/// Validates the batch and returns the shared embedding dimension.
fn check_batch<S: AsRef<[f64]>>(sat: &[S], groups: &[GroundGroup]) -> Result<usize, AlignError> {
    if sat.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    if sat.len() != groups.len() {
        return Err(AlignError::GroupMismatch {
            anchors: sat.len(),
            groups: groups.len(),
        });
    }
    let dim = groups[0].dim();
    for g in groups {
        if g.dim() != dim {
            return Err(AlignError::Dim {
                expected: dim,
                got: g.dim(),
            });
        }
    }
    for (i, s) in sat.iter().enumerate() {
        check_anchor(i, s.as_ref(), dim)?;
    }
    Ok(dim)
}

/// Every ground embedding of the batch, flattened in (tile, ground) order.
fn flatten(groups: &[GroundGroup]) -> Vec<&[f64]> {
    groups
        .iter()
        .flat_map(|g| g.embeddings.iter().map(EmbeddingVec::as_slice))
        .collect()
}

/// Max-shifted log-sum-exp and the corresponding softmax.
fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// `sum_k weights[k] * vectors[k]`.
fn weighted_sum(weights: &[f64], vectors: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(vectors) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

fn logits(anchor: &[f64], keys: &[&[f64]], tau: f64) -> Vec<f64> {
    keys.iter().map(|k| dot(anchor, k) / tau).collect()
}

fn reduce(terms: Vec<(f64, Vec<f64>)>) -> LossGrad {
    let n = terms.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(terms.len());
    for (t, g) in terms {
        value += t;
        grad.push(g);
    }
    LossGrad {
        value: value / n,
        grad,
    }
}

/// Multi-positive contrastive loss on tile embeddings.
///
/// For tile `i` every ground image of every tile in the batch sits in the
/// softmax denominator; each of the tile's own `N_i` ground images is a
/// positive. The loss averages `-log p(g_i^j | s_i)` over positives, then over
/// tiles.
pub fn image_loss<S: AsRef<[f64]> + Sync>(
    sat: &[S],
    groups: &[GroundGroup],
    tau: f64,
) -> Result<LossGrad, AlignError> {
    check_tau(tau)?;
    let dim = check_batch(sat, groups)?;
    let keys = flatten(groups);
    let nb = sat.len() as f64;
    let offsets = group_offsets(groups);
    let terms = exec::map_range(sat.len(), |i| {
        let s = sat[i].as_ref();
        let z = logits(s, &keys, tau);
        let (lse, p) = log_softmax_parts(&z);
        let own = offsets[i]..offsets[i] + groups[i].len();
        let ni = groups[i].len() as f64;
        let term: f64 = z[own].iter().map(|zj| lse - zj).sum::<f64>() / ni;
        let expected = weighted_sum(&p, &keys, dim);
        let grad = expected
            .iter()
            .zip(&groups[i].mean)
            .map(|(e, m)| (e - m) / (tau * nb))
            .collect();
        (term, grad)
    });
    Ok(reduce(terms))
}

fn group_offsets(groups: &[GroundGroup]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(groups.len());
    let mut acc = 0;
    for g in groups {
        offsets.push(acc);
        acc += g.len();
    }
    offsets
}

/// Pixel-level multi-positive contrastive loss.
///
/// `patch_embs[i]` is tile `i`'s row-major `grid_dim x grid_dim` grid of unit
/// patch embeddings and `pixels[i][j]` the pixel of ground image `j` in that
/// tile. The anchor for ground `j` is the patch containing its pixel; the
/// denominator spans every ground image in the batch. Patches with no ground
/// image receive no gradient.
pub fn pixel_loss<S, G>(
    patch_embs: &[G],
    grid_dim: u32,
    patch_px: u32,
    pixels: &[Vec<PixelCoord>],
    groups: &[GroundGroup],
    tau: f64,
) -> Result<PixelLossGrad, AlignError>
where
    S: AsRef<[f64]> + Sync,
    G: AsRef<[S]> + Sync,
{
    check_tau(tau)?;
    if patch_embs.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    if patch_embs.len() != groups.len() || pixels.len() != groups.len() {
        return Err(AlignError::GroupMismatch {
            anchors: patch_embs.len(),
            groups: groups.len(),
        });
    }
    if patch_px == 0 {
        return Err(AlignError::Shape("patch size must be positive".into()));
    }
    let dim = groups[0].dim();
    let n_patches = (grid_dim * grid_dim) as usize;

    // Resolve each ground's patch and validate only the anchors in use.
    let mut anchors: Vec<Vec<usize>> = Vec::with_capacity(groups.len());
    for (i, ((grid, px), g)) in patch_embs.iter().zip(pixels).zip(groups).enumerate() {
        let grid = grid.as_ref();
        if grid.len() != n_patches {
            return Err(AlignError::Shape(format!(
                "tile {i} has {} patches, expected {n_patches}",
                grid.len()
            )));
        }
        if px.len() != g.len() {
            return Err(AlignError::Shape(format!(
                "tile {i} has {} pixels for {} ground images",
                px.len(),
                g.len()
            )));
        }
        if g.dim() != dim {
            return Err(AlignError::Dim {
                expected: dim,
                got: g.dim(),
            });
        }
        let mut idx = Vec::with_capacity(px.len());
        for (j, p) in px.iter().enumerate() {
            let (pr, pc) = (p.row / patch_px, p.col / patch_px);
            if pr >= grid_dim || pc >= grid_dim {
                return Err(AlignError::PixelOutOfGrid { tile: i, ground: j });
            }
            let k = (pr * grid_dim + pc) as usize;
            check_anchor(i, grid[k].as_ref(), dim)?;
            idx.push(k);
        }
        anchors.push(idx);
    }

    let keys = flatten(groups);
    let offsets = group_offsets(groups);
    let nb = groups.len() as f64;
    let per_tile = exec::map_range(groups.len(), |i| {
        let ni = groups[i].len() as f64;
        let scale = 1.0 / (tau * nb * ni);
        let mut grad = vec![vec![0.0; dim]; n_patches];
        let mut term = 0.0;
        for (j, &k) in anchors[i].iter().enumerate() {
            let a = patch_embs[i].as_ref()[k].as_ref();
            let z = logits(a, &keys, tau);
            let (lse, p) = log_softmax_parts(&z);
            term += lse - z[offsets[i] + j];
            let expected = weighted_sum(&p, &keys, dim);
            let own = keys[offsets[i] + j];
            for ((g, e), o) in grad[k].iter_mut().zip(&expected).zip(own.iter()) {
                *g += (e - o) * scale;
            }
        }
        (term / ni, grad)
    });

    let mut value = 0.0;
    let mut grad = Vec::with_capacity(per_tile.len());
    for (t, g) in per_tile {
        value += t;
        grad.push(g);
    }
    Ok(PixelLossGrad {
        value: value / nb,
        grad,
    })
}

/// `-log` of the mean positive probability for each tile, averaged over tiles.
pub fn loss_sum_prob<S: AsRef<[f64]> + Sync>(
    sat: &[S],
    groups: &[GroundGroup],
    tau: f64,
) -> Result<LossGrad, AlignError> {
    check_tau(tau)?;
    let dim = check_batch(sat, groups)?;
    let keys = flatten(groups);
    let nb = sat.len() as f64;
    let offsets = group_offsets(groups);
    let terms = exec::map_range(sat.len(), |i| {
        let s = sat[i].as_ref();
        let z = logits(s, &keys, tau);
        let (lse_all, p_all) = log_softmax_parts(&z);
        let own = offsets[i]..offsets[i] + groups[i].len();
        let (lse_own, q_own) = log_softmax_parts(&z[own.clone()]);
        let ni = groups[i].len() as f64;
        let term = (lse_all - lse_own) + ni.ln();
        let all = weighted_sum(&p_all, &keys, dim);
        let pos = weighted_sum(&q_own, &keys[own], dim);
        let grad = all
            .iter()
            .zip(&pos)
            .map(|(a, b)| (a - b) / (tau * nb))
            .collect();
        (term, grad)
    });
    Ok(reduce(terms))
}

/// Single-positive contrastive loss whose positive for tile `i` is the
/// normalized mean of its ground embeddings; the other tiles' normalized
/// means act as negatives.
pub fn loss_avg_rep<S: AsRef<[f64]> + Sync>(
    sat: &[S],
    groups: &[GroundGroup],
    tau: f64,
) -> Result<LossGrad, AlignError> {
    check_tau(tau)?;
    let dim = check_batch(sat, groups)?;
    let mut centers = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let norm = l2_norm(&g.mean);
        if norm < MIN_NORM {
            return Err(AlignError::DegenerateMean { tile: i });
        }
        centers.push(g.mean.iter().map(|m| m / norm).collect::<Vec<f64>>());
    }
    let keys: Vec<&[f64]> = centers.iter().map(Vec::as_slice).collect();
    let nb = sat.len() as f64;
    let terms = exec::map_range(sat.len(), |i| {
        let s = sat[i].as_ref();
        let z = logits(s, &keys, tau);
        let (lse, p) = log_softmax_parts(&z);
        let expected = weighted_sum(&p, &keys, dim);
        let grad = expected
            .iter()
            .zip(&centers[i])
            .map(|(e, c)| (e - c) / (tau * nb))
            .collect();
        (lse - z[i], grad)
    });
    Ok(reduce(terms))
}

/// Mean squared distance between each tile embedding and its ground
/// embeddings, averaged per tile and then over tiles.
pub fn loss_l2<S: AsRef<[f64]> + Sync>(
    sat: &[S],
    groups: &[GroundGroup],
) -> Result<LossGrad, AlignError> {
    check_batch(sat, groups)?;
    let nb = sat.len() as f64;
    let terms = exec::map_range(sat.len(), |i| {
        let s = sat[i].as_ref();
        let g = &groups[i];
        let term = g
            .embeddings
            .iter()
            .map(|e| {
                s.iter()
                    .zip(e.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / g.len() as f64;
        let grad = s
            .iter()
            .zip(&g.mean)
            .map(|(a, m)| 2.0 * (a - m) / nb)
            .collect();
        (term, grad)
    });
    Ok(reduce(terms))
}

/// Dispatches an image-level variant. Pixel-level training goes through
/// [`pixel_loss`] directly because it needs patch grids.
pub fn image_level_loss<S: AsRef<[f64]> + Sync>(
    cfg: &LossConfig,
    sat: &[S],
    groups: &[GroundGroup],
) -> Result<LossGrad, AlignError> {
    match cfg.variant {
        LossVariant::Image => image_loss(sat, groups, cfg.tau),
        LossVariant::SumProb => loss_sum_prob(sat, groups, cfg.tau),
        LossVariant::AvgRep => loss_avg_rep(sat, groups, cfg.tau),
        LossVariant::L2 => loss_l2(sat, groups),
        LossVariant::Pixel => Err(AlignError::Shape(
            "pixel loss needs patch embeddings".into(),
        )),
    }
}
