//! Pseudo-labeling: DBSCAN over a precomputed distance matrix, nearest-inlier
//! labels for outliers, and a k-means backend that marks its furthest
//! samples as outliers.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metric::DistanceMatrix;
use crate::rng::stream;

/// Per-sample cluster id, `None` for outliers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inliers(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn outliers(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Relabels cluster ids to `0..n` in order of first appearance.
    pub fn compact(labels: Vec<Option<usize>>) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<Option<usize>> = labels
            .into_iter()
            .map(|l| {
                l.map(|c| {
                    let next = map.len();
                    *map.entry(c).or_insert(next)
                })
            })
            .collect();
        ClusterAssignment {
            n_clusters: map.len(),
            labels,
        }
    }

    /// `sample_index,cluster_or_-1` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_index", "cluster"])?;
        for (i, l) in self.labels.iter().enumerate() {
            let c = l.map_or(-1, |c| c as i64);
            w.write_record([i.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Dbscan,
    Kmeans,
}

/// When the DBSCAN radius is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPolicy {
    /// Estimate once on the first clustering of a run, then keep it fixed.
    FirstRound,
    /// Re-estimate on every clustering.
    EveryRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub min_pts: usize,
    /// Fraction of smallest pairwise distances averaged into eps.
    pub rho: f64,
    /// Absolute eps; overrides `rho` when set.
    pub eps: Option<f64>,
    pub eps_policy: EpsPolicy,
    pub backend: Backend,
    pub k_means_k: usize,
    /// Fraction of furthest samples marked as outliers by k-means.
    pub outlier_frac: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            min_pts: 4,
            rho: 1.6e-3,
            eps: None,
            eps_policy: EpsPolicy::FirstRound,
            backend: Backend::Dbscan,
            k_means_k: 50,
            outlier_frac: 0.2,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.min_pts >= 1, || "cluster.min_pts must be >= 1".into())?;
        ensure(self.rho > 0.0 && self.rho < 1.0, || format!("cluster.rho must lie in (0, 1), got {}", self.rho))?;
        if let Some(eps) = self.eps {
            ensure(eps.is_finite() && eps >= 0.0, || format!("cluster.eps must be >= 0, got {eps}"))?;
        }
        ensure(self.k_means_k >= 1, || "cluster.k_means_k must be >= 1".into())?;
        ensure((0.0..1.0).contains(&self.outlier_frac), || {
            format!("cluster.outlier_frac must lie in [0, 1), got {}", self.outlier_frac)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsEstimate {
    pub eps: f64,
    /// Every averaged distance was zero (duplicate points dominate).
    pub degenerate: bool,
}

/// Mean of the `ceil(rho * n * (n - 1))` smallest off-diagonal entries,
/// counting each unordered pair twice.
pub fn compute_eps(d: &DistanceMatrix, rho: f64) -> Result<EpsEstimate> {
    let n = d.n();
    if n < 2 {
        return Err(Error::Empty("eps estimation needs at least two samples"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidConfig(format!("rho must lie in (0, 1), got {rho}")));
    }
    let total = n * (n - 1);
    let count = ((rho * total as f64).ceil() as usize).clamp(1, total);
    let mut entries: Vec<f64> = Vec::with_capacity(total);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                entries.push(d.get(i, j));
            }
        }
    }
    if count < total {
        entries.select_nth_unstable_by(count - 1, f64::total_cmp);
    }
    let smallest = &mut entries[..count];
    smallest.sort_by(f64::total_cmp);
    let eps = smallest.iter().sum::<f64>() / count as f64;
    let degenerate = eps == 0.0;
    if degenerate {
        log::warn!("density radius is zero: the {count} smallest distances all vanish");
    }
    Ok(EpsEstimate { eps, degenerate })
}

/// DBSCAN on a precomputed distance matrix.
///
/// A sample is core when at least `min_pts` samples (itself included) lie
/// within `eps`. Clusters are the eps-connected components of core samples,
/// numbered by their lowest-index core. A non-core sample within `eps` of a
/// core joins the cluster of its lowest-index core neighbor; the rest are
/// outliers.
pub fn dbscan(d: &DistanceMatrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be finite and >= 0, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidConfig("min_pts must be >= 1".into()));
    }
    let n = d.n();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(n_clusters);
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(n_clusters);
                    stack.push(q);
                }
            }
        }
        n_clusters += 1;
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = neighbors[i].iter().find(|&&j| core[j]).and_then(|&j| labels[j]);
        }
    }
    Ok(ClusterAssignment { labels, n_clusters })
}

/// Label of the nearest inlier for every outlier, as `(sample, label)` pairs
/// in ascending sample order. Ties go to the lowest-index inlier.
pub fn assign_outlier_labels(d: &DistanceMatrix, assignment: &ClusterAssignment) -> Result<Vec<(usize, usize)>> {
    if d.n() != assignment.len() {
        return Err(Error::Shape(format!(
            "distance matrix has {} samples, assignment {}",
            d.n(),
            assignment.len()
        )));
    }
    let inliers = assignment.inliers();
    if inliers.is_empty() {
        return Err(Error::NoInliers);
    }
    Ok(assignment
        .outliers()
        .into_iter()
        .map(|o| {
            let mut best = inliers[0];
            for &j in &inliers[1..] {
                if d.get(o, j) < d.get(o, best) {
                    best = j;
                }
            }
            (o, assignment.labels[best].expect("inlier"))
        })
        .collect())
}

/// Full label vector with outliers replaced by their nearest-inlier labels.
pub fn merged_labels(assignment: &ClusterAssignment, outlier_labels: &[(usize, usize)]) -> Vec<usize> {
    let mut out: Vec<usize> = assignment.labels.iter().map(|l| l.unwrap_or(usize::MAX)).collect();
    for &(i, l) in outlier_labels {
        out[i] = l;
    }
    debug_assert!(out.iter().all(|&l| l != usize::MAX));
    out
}

const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's k-means with k-means++ seeding; the `ceil(u * n)` samples furthest
/// from their centroid become outliers (ties: lowest index first).
pub fn kmeans_with_outliers(x: ArrayView2<'_, f64>, k: usize, u: f64, seed: u64) -> Result<ClusterAssignment> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("k = {k} must satisfy 1 <= k <= n = {n}")));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::InvalidConfig(format!("outlier fraction must lie in [0, 1), got {u}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    let sq = |a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>| -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
    };

    let mut rng = stream(seed, 21);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| nearest[i]).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                if nearest[i] > 0.0 {
                    pick = Some(i);
                    target -= nearest[i];
                    if target <= 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive weight")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[pick] = true;
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            nearest[i] = nearest[i].min(sq(x.row(i), x.row(pick)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let (best, bd) = (0..k)
                .map(|c| (c, sq(x.row(i), centroids.row(c))))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            dist[i] = bd;
        }
        let mut sums = Array2::<f64>::zeros((k, x.ncols()));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(assign[i]).scaled_add(1.0, &x.row(i));
            counts[assign[i]] += 1;
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                // Move the empty centroid onto the sample furthest from its own centroid.
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(far) = far {
                    counts[assign[far]] -= 1;
                    sums.row_mut(assign[far]).scaled_add(-1.0, &x.row(far));
                    assign[far] = c;
                    dist[far] = 0.0;
                    counts[c] = 1;
                    sums.row_mut(c).assign(&x.row(far));
                    reseeded = true;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    for i in 0..n {
        dist[i] = sq(x.row(i), centroids.row(assign[i]));
    }

    let n_out = (u * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut labels: Vec<Option<usize>> = assign.into_iter().map(Some).collect();
    for &i in order.iter().take(n_out) {
        labels[i] = None;
    }
    // Keep centroid order for the surviving clusters.
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for c in 0..k {
        if labels.contains(&Some(c)) {
            remap[c] = next;
            next += 1;
        }
    }
    Ok(ClusterAssignment {
        labels: labels.into_iter().map(|l| l.map(|c| remap[c])).collect(),
        n_clusters: next,
    })
}
