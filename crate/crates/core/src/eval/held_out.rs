//! Metrics of an encoder on held-out tiles with known labels.

use super::{
    class_scores, mean_ap_at_k, multilabel_map, per_class_accuracy_many, retrieve, segment_patches,
    upsample_logits, zero_shot_classify, ClassAccuracy, EvalError, LabelGrid, MultilabelMap, RankedResult,
};
use crate::align::EncoderOutput;
use crate::corpus::EvalTile;
use crate::frozen::EmbeddingVec;

#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutReport {
    /// Predicted class per tile.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// Multilabel mAP with a tile's present classes as positives.
    pub multilabel: MultilabelMap,
    /// One ranking of all tiles per class query, in class order.
    pub rankings: Vec<RankedResult>,
    pub map_at_20: f64,
    pub map_at_100: f64,
    /// Per-class segmentation accuracy pooled over tiles, measured after
    /// upsampling the patch logits.
    pub segmentation: ClassAccuracy,
}

/// Classification, retrieval and segmentation metrics. A tile is relevant to
/// a class query when the class is its majority label. Segmentation logits
/// are upsampled bicubically by `upsample` before the argmax and compared with
/// nearest-upsampled patch labels; 1 scores at patch resolution.
pub fn held_out_report(
    outputs: &[EncoderOutput],
    tiles: &[EvalTile],
    class_names: &[String],
    class_embs: &[EmbeddingVec],
    upsample: usize,
) -> Result<HeldOutReport, EvalError> {
    if outputs.len() != tiles.len() || tiles.is_empty() {
        return Err(EvalError::Shape(format!(
            "{} encoder outputs for {} tiles",
            outputs.len(),
            tiles.len()
        )));
    }
    if class_names.len() != class_embs.len() {
        return Err(EvalError::Shape(format!(
            "{} class names for {} class embeddings",
            class_names.len(),
            class_embs.len()
        )));
    }

    let predictions = outputs
        .iter()
        .map(|o| zero_shot_classify(o.image_emb.as_slice(), class_embs))
        .collect::<Result<Vec<_>, _>>()?;
    let correct = predictions
        .iter()
        .zip(tiles)
        .filter(|(&p, t)| p == t.label as usize)
        .count();
    let accuracy = correct as f64 / tiles.len() as f64;

    let scores = outputs
        .iter()
        .map(|o| class_scores(o.image_emb.as_slice(), class_embs))
        .collect::<Result<Vec<_>, _>>()?;
    let present: Vec<&[bool]> = tiles.iter().map(|t| t.present.as_slice()).collect();
    let multilabel = multilabel_map(&scores, &present)?;

    let items: Vec<(&str, &[f64])> = tiles
        .iter()
        .zip(outputs)
        .map(|(t, o)| (t.tile.id.as_str(), o.image_emb.as_slice()))
        .collect();
    let label_of: std::collections::HashMap<&str, usize> = tiles
        .iter()
        .map(|t| (t.tile.id.as_str(), t.label as usize))
        .collect();
    let mut rankings = Vec::with_capacity(class_embs.len());
    let mut relevance = Vec::with_capacity(class_embs.len());
    for (k, (name, emb)) in class_names.iter().zip(class_embs).enumerate() {
        let ranked = retrieve(name, emb.as_slice(), &items)?;
        relevance.push(ranked.ids().map(|id| label_of[id] == k).collect::<Vec<bool>>());
        rankings.push(ranked);
    }

    let mut grids = Vec::with_capacity(tiles.len());
    for (t, o) in tiles.iter().zip(outputs) {
        let g = t.tile.spec.grid_dim() as usize;
        let gt = LabelGrid::new(g, g, t.patch_labels.clone())?;
        let (pred, logits) = segment_patches(&o.patch_embs, g, g, class_embs)?;
        if upsample == 1 {
            grids.push((pred, gt));
        } else {
            let pred = upsample_logits(&logits, upsample)?.argmax();
            grids.push((pred, gt.upsample_nearest(upsample)));
        }
    }
    let pairs: Vec<(&LabelGrid, &LabelGrid)> = grids.iter().map(|(p, g)| (p, g)).collect();

    Ok(HeldOutReport {
        predictions,
        accuracy,
        multilabel,
        map_at_20: mean_ap_at_k(&relevance, 20),
        map_at_100: mean_ap_at_k(&relevance, 100),
        rankings,
        segmentation: per_class_accuracy_many(&pairs)?,
    })
}

/// Encoder outputs that reproduce the ground truth exactly: every patch and
/// the tile itself map to their class embedding.
pub fn oracle_outputs(tiles: &[EvalTile], class_embs: &[EmbeddingVec]) -> Vec<EncoderOutput> {
    tiles
        .iter()
        .map(|t| EncoderOutput {
            patch_embs: t
                .patch_labels
                .iter()
                .map(|&k| class_embs[k as usize].clone())
                .collect(),
            image_emb: class_embs[t.label as usize].clone(),
        })
        .collect()
}
