//! Zero-shot evaluation: classification, ranking metrics, segmentation and
//! density maps. Scores are cosine similarities between unit vectors, and
//! ties always break toward the lower index or id.

mod density;
mod held_out;
mod ranking;
mod segment;

use thiserror::Error;

use crate::frozen::dot;

pub use density::{density_map, DensityMap};
pub use held_out::{held_out_report, oracle_outputs, HeldOutReport};
pub use ranking::{
    average_precision_at_k, mean_ap_at_k, multilabel_map, retrieve, MultilabelMap, RankedResult,
};
pub use segment::{
    per_class_accuracy, per_class_accuracy_many, segment_patches, upsample_logits, ClassAccuracy,
    LabelGrid, LogitGrid,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no classes to score against")]
    NoClasses,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no class has a positive example")]
    NoPositiveClasses,
    #[error("ground truth contains no labeled pixels")]
    NoPresentClasses,
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_dim(expected: usize, got: usize) -> Result<(), EvalError> {
    if expected == got {
        Ok(())
    } else {
        Err(EvalError::Dim { expected, got })
    }
}

/// Cosine score of `query` against every class embedding.
pub fn class_scores<S: AsRef<[f64]>>(query: &[f64], class_embs: &[S]) -> Result<Vec<f64>, EvalError> {
    class_embs
        .iter()
        .map(|c| {
            let c = c.as_ref();
            check_dim(query.len(), c.len())?;
            Ok(dot(query, c))
        })
        .collect()
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Zero-shot label: the class whose embedding has the highest cosine score.
pub fn zero_shot_classify<S: AsRef<[f64]>>(image_emb: &[f64], class_embs: &[S]) -> Result<usize, EvalError> {
    argmax(&class_scores(image_emb, class_embs)?).ok_or(EvalError::NoClasses)
}
