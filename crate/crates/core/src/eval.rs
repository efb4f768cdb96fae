//! Retrieval metrics under the cross-camera protocol and pair-counting
//! cluster quality.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasynth::{EvalSplit, FeatureSet};
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    /// `cmc[k]`: fraction of evaluated queries with a match in the top `k + 1`.
    pub cmc: Vec<f64>,
    /// Queries without any valid gallery match.
    pub skipped: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Average precision of one ranked relevance list, `None` when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

/// Identity and camera tags of one side of a retrieval problem.
#[derive(Debug, Clone, Copy)]
pub struct Tags<'a> {
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

/// mAP and CMC with gallery ranked by ascending Euclidean distance (ties by
/// gallery index). Gallery rows sharing both identity and camera with the
/// query are removed from that query's ranking.
pub fn map_and_cmc(query: ArrayView2<'_, f64>, gallery: ArrayView2<'_, f64>, q: Tags<'_>, g: Tags<'_>) -> Result<RetrievalResult> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", query.ncols(), gallery.ncols())));
    }
    if q.ids.len() != query.nrows() || q.cams.len() != query.nrows() || g.ids.len() != gallery.nrows() || g.cams.len() != gallery.nrows() {
        return Err(Error::Shape("tag lengths do not match embedding rows".into()));
    }
    let n_g = gallery.nrows();
    let mut cmc_hits = vec![0usize; n_g];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(n_g);
    for (qi, qrow) in query.rows().into_iter().enumerate() {
        let dist: Vec<f64> = gallery
            .rows()
            .into_iter()
            .map(|grow| qrow.iter().zip(grow).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        order.clear();
        order.extend((0..n_g).filter(|&j| !(g.ids[j] == q.ids[qi] && g.cams[j] == q.cams[qi])));
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let relevance: Vec<bool> = order.iter().map(|&j| g.ids[j] == q.ids[qi]).collect();
        match average_precision(&relevance) {
            Some(ap) => {
                ap_sum += ap;
                evaluated += 1;
                let first = relevance.iter().position(|&r| r).expect("relevant");
                cmc_hits[first] += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Ok(RetrievalResult {
            map: 0.0,
            cmc: vec![0.0; n_g],
            skipped,
        });
    }
    let mut cmc = Vec::with_capacity(n_g);
    let mut running = 0usize;
    for h in cmc_hits {
        running += h;
        cmc.push(running as f64 / evaluated as f64);
    }
    Ok(RetrievalResult {
        map: ap_sum / evaluated as f64,
        cmc,
        skipped,
    })
}

/// Pair-counting F1 between predicted and true labels. Zero when no pair is
/// co-labeled on either side.
pub fn pairwise_f_score(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    // Contingency counting: pairs within a (pred, truth) cell are true positives.
    let pairs = |c: usize| (c * c.saturating_sub(1) / 2) as f64;
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pred_sizes: HashMap<usize, usize> = HashMap::new();
    let mut truth_sizes: HashMap<usize, usize> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *cells.entry((p, t)).or_default() += 1;
        *pred_sizes.entry(p).or_default() += 1;
        *truth_sizes.entry(t).or_default() += 1;
    }
    let tp: f64 = cells.values().map(|&c| pairs(c)).sum();
    let same_pred: f64 = pred_sizes.values().map(|&c| pairs(c)).sum();
    let same_truth: f64 = truth_sizes.values().map(|&c| pairs(c)).sum();
    if same_pred == 0.0 || same_truth == 0.0 || tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / same_pred;
    let recall = tp / same_truth;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Rows scaled to unit Euclidean norm (zero rows stay zero).
pub fn l2_normalize(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Embeds features and L2-normalizes them; the representation used for
/// clustering and retrieval.
pub fn extract(params: &EncoderParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(l2_normalize(&forward(params, features.view())?))
}

/// Holds the ground truth of a labeled set and its query/gallery split.
/// The only place target identities are read.
pub struct Evaluator<'a> {
    set: &'a FeatureSet,
    split: &'a EvalSplit,
}

impl<'a> Evaluator<'a> {
    pub fn new(set: &'a FeatureSet, split: &'a EvalSplit) -> Self {
        Evaluator { set, split }
    }

    pub fn retrieval(&self, params: &EncoderParams) -> Result<RetrievalResult> {
        let emb = extract(params, self.set.features())?;
        self.retrieval_from_embeddings(&emb)
    }

    pub fn retrieval_from_embeddings(&self, emb: &Array2<f64>) -> Result<RetrievalResult> {
        let (qi, gi) = (&self.split.query_indices, &self.split.gallery_indices);
        let pick = |idx: &[usize], v: &[usize]| -> Vec<usize> { idx.iter().map(|&i| v[i]).collect() };
        let (q_ids, q_cams) = (pick(qi, self.set.identities()), pick(qi, self.set.cameras()));
        let (g_ids, g_cams) = (pick(gi, self.set.identities()), pick(gi, self.set.cameras()));
        map_and_cmc(
            emb.select(Axis(0), qi).view(),
            emb.select(Axis(0), gi).view(),
            Tags { ids: &q_ids, cams: &q_cams },
            Tags { ids: &g_ids, cams: &g_cams },
        )
    }

    pub fn f_score(&self, merged_labels: &[usize]) -> Result<f64> {
        pairwise_f_score(merged_labels, self.set.identities())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, true]), Some(1.0));
        assert_eq!(average_precision(&[false, false, false, true]), Some(0.25));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn perfect_retrieval() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let g = array![[0.0, 1.0], [1.0, 0.0]];
        let r = map_and_cmc(
            q.view(),
            g.view(),
            Tags { ids: &[0, 1], cams: &[0, 0] },
            Tags { ids: &[1, 0], cams: &[1, 1] },
        )
        .unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1(), 1.0);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        let q = array![[0.0], [5.0]];
        let g = array![[0.0], [5.0], [9.0]];
        let r = map_and_cmc(
            q.view(),
            g.view(),
            Tags { ids: &[0, 1], cams: &[0, 0] },
            Tags { ids: &[0, 1, 1], cams: &[0, 2, 1] },
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.map, 1.0);
        assert_eq!(*r.cmc.last().unwrap(), 1.0);
    }

    #[test]
    fn f_score_examples() {
        assert_eq!(pairwise_f_score(&[3, 3, 1, 1], &[0, 0, 2, 2]).unwrap(), 1.0);
        assert!((pairwise_f_score(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(pairwise_f_score(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(pairwise_f_score(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn normalization() {
        let n = l2_normalize(&array![[3.0, 4.0], [0.0, 0.0]]);
        assert_eq!(n, array![[0.6, 0.8], [0.0, 0.0]]);
    }
}
