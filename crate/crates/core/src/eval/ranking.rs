//! Retrieval ranking and average-precision metrics.

use serde::{Deserialize, Serialize};

use super::{check_dim, EvalError};
use crate::frozen::dot;

/// Items ranked for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub items: Vec<(String, f64)>,
}

impl RankedResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(id, _)| id.as_str())
    }
}

/// Ranks items by cosine score against the query, descending, ties by id.
pub fn retrieve<I, S>(query_id: &str, query: &[f64], items: &[(I, S)]) -> Result<RankedResult, EvalError>
where
    I: AsRef<str>,
    S: AsRef<[f64]>,
{
    let mut ranked = items
        .iter()
        .map(|(id, emb)| {
            let emb = emb.as_ref();
            check_dim(query.len(), emb.len())?;
            Ok((id.as_ref().to_string(), dot(query, emb)))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedResult {
        query_id: query_id.to_string(),
        items: ranked,
    })
}

/// Average precision over the top `k` ranks, normalized by `min(k, R)` where
/// `R` counts the relevant items in the whole list. Zero when nothing is
/// relevant.
pub fn average_precision_at_k(relevance: &[bool], k: usize) -> f64 {
    let total = relevance.iter().filter(|&&r| r).count();
    let norm = k.min(total);
    if norm == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / norm as f64
}

/// Mean of [`average_precision_at_k`] over queries.
pub fn mean_ap_at_k<R: AsRef<[bool]>>(per_query: &[R], k: usize) -> f64 {
    if per_query.is_empty() {
        return 0.0;
    }
    per_query
        .iter()
        .map(|r| average_precision_at_k(r.as_ref(), k))
        .sum::<f64>()
        / per_query.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilabelMap {
    pub mean: f64,
    /// AP per class; `None` for classes without positives, which are skipped.
    pub per_class: Vec<Option<f64>>,
}

impl MultilabelMap {
    pub fn skipped(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&c| self.per_class[c].is_none())
            .collect()
    }
}

/// Mean over classes of the area under the precision-recall curve, each class
/// ranking items by score (ties by item index).
pub fn multilabel_map<S, L>(scores: &[S], labels: &[L]) -> Result<MultilabelMap, EvalError>
where
    S: AsRef<[f64]>,
    L: AsRef<[bool]>,
{
    if scores.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let n_classes = labels.first().map_or(0, |l| l.as_ref().len());
    for (s, l) in scores.iter().zip(labels) {
        check_dim(n_classes, s.as_ref().len())?;
        check_dim(n_classes, l.as_ref().len())?;
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    for c in 0..n_classes {
        order.sort_by(|&a, &b| {
            scores[b].as_ref()[c]
                .total_cmp(&scores[a].as_ref()[c])
                .then(a.cmp(&b))
        });
        let rel: Vec<bool> = order.iter().map(|&i| labels[i].as_ref()[c]).collect();
        let positives = rel.iter().filter(|&&r| r).count();
        per_class.push((positives > 0).then(|| average_precision_at_k(&rel, rel.len())));
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(EvalError::NoPositiveClasses);
    }
    Ok(MultilabelMap {
        mean: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision_at_k(&[true, true, true], 3), 1.0);
        let v = average_precision_at_k(&[true, false, true], 3);
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision_at_k(&[false, false, false], 3), 0.0);
    }

    #[test]
    fn ap_ignores_ranks_past_k() {
        let a = average_precision_at_k(&[true, false, true, true, false], 2);
        let b = average_precision_at_k(&[true, false, true, false, true], 2);
        assert_eq!(a, b);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn retrieval_orders_by_score_then_id() {
        let items = vec![
            ("b", vec![1.0, 0.0]),
            ("a", vec![1.0, 0.0]),
            ("c", vec![0.0, 1.0]),
        ];
        let r = retrieve("q", &[1.0, 0.0], &items).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["a", "b", "c"]);
        assert_eq!(r.items[0].1, 1.0);
        let mut rev = items.clone();
        rev.reverse();
        assert_eq!(retrieve("q", &[1.0, 0.0], &rev).unwrap(), r);
        let single = retrieve("q", &[0.0, 1.0], &items[..1]).unwrap();
        assert_eq!(single.ids().collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn multilabel_examples() {
        let labels = vec![vec![true, false], vec![false, true], vec![true, true]];
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(multilabel_map(&scores, &labels).unwrap().mean, 1.0);

        let labels = vec![vec![true], vec![false], vec![true]];
        let scores = vec![vec![0.9], vec![0.5], vec![0.1]];
        let m = multilabel_map(&scores, &labels).unwrap();
        assert!((m.mean - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let labels = vec![vec![true, false], vec![false, false]];
        let scores = vec![vec![0.2, 0.1], vec![0.1, 0.3]];
        let m = multilabel_map(&scores, &labels).unwrap();
        assert_eq!(m.per_class[1], None);
        assert_eq!(m.skipped(), vec![1]);
        let none = vec![vec![false], vec![false]];
        assert!(matches!(
            multilabel_map(&[vec![0.0], vec![1.0]], &none),
            Err(EvalError::NoPositiveClasses)
        ));
    }
}
