//! Clustering distance built from k-reciprocal neighborhoods.
//!
//! Pairwise similarities are kept only inside each sample's refined
//! k-reciprocal set, rows are compared with a weighted Jaccard distance, and
//! the result is blended with a per-sample term that penalizes target
//! samples far from every source sample.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Symmetric, nonnegative, zero-diagonal matrix of pairwise distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::Shape(format!("distance matrix is {}x{}", n, values.ncols())));
        }
        for i in 0..n {
            if values[[i, i]] != 0.0 {
                return Err(Error::InvalidConfig(format!("distance matrix diagonal at {i} is nonzero")));
            }
            for j in 0..n {
                let v = values[[i, j]];
                if !v.is_finite() {
                    return Err(Error::NonFinite("distance matrix"));
                }
                if v < 0.0 || v != values[[j, i]] {
                    return Err(Error::InvalidConfig(format!(
                        "distance matrix entry ({i},{j}) is negative or asymmetric"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { values })
    }

    pub(crate) fn from_raw(values: Array2<f64>) -> Self {
        debug_assert_eq!(values.nrows(), values.ncols());
        DistanceMatrix { values }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.values, out)
    }
}

/// Row-wise similarity over refined k-reciprocal sets. Entries lie in
/// `[0, 1]` and the diagonal is 1; the matrix need not be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::Shape(format!("similarity matrix is {}x{}", n, values.ncols())));
        }
        for ((i, j), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("similarity matrix"));
            }
            if !(0.0..=1.0).contains(&v) || (i == j && v != 1.0) {
                return Err(Error::InvalidConfig(format!("similarity entry ({i},{j}) = {v} out of contract")));
            }
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.values, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Reciprocal-neighborhood size; clamped to `n - 1` on small sets.
    pub k: usize,
    /// Weight of the source-proximity term.
    pub lambda: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { k: 20, lambda: 0.1 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.k >= 1, || "metric.k must be >= 1".into())?;
        ensure((0.0..=1.0).contains(&self.lambda), || {
            format!("metric.lambda must lie in [0, 1], got {}", self.lambda)
        })
    }
}

pub fn pairwise_sq_euclidean(x: ArrayView2<'_, f64>) -> Result<DistanceMatrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Empty("pairwise distances need at least two rows"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding matrix"));
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let xi = x.row(i);
        for j in i + 1..n {
            let d: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(DistanceMatrix::from_raw(out))
}

/// Sorted neighbor lists of every sample, used to answer k-reciprocal
/// queries without re-sorting.
pub struct NeighborIndex {
    /// `order[i]`: all `j != i` sorted by `(D[i][j], j)`.
    order: Vec<Vec<usize>>,
    /// `rank[[i, j]]`: position of `j` in `order[i]` (`usize::MAX` on the diagonal).
    rank: Array2<usize>,
}

impl NeighborIndex {
    pub fn new(d: &DistanceMatrix) -> Self {
        let n = d.n();
        let mut order = Vec::with_capacity(n);
        let mut rank = Array2::from_elem((n, n), usize::MAX);
        for i in 0..n {
            let mut row: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            row.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
            for (pos, &j) in row.iter().enumerate() {
                rank[[i, j]] = pos;
            }
            order.push(row);
        }
        NeighborIndex { order, rank }
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    /// `R(i, k)`: `j` among the `k` nearest of `i` and `i` among the `k` nearest of `j`.
    pub fn reciprocal(&self, i: usize, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.order[i]
            .iter()
            .take(k)
            .copied()
            .filter(|&j| self.rank[[j, i]] < k)
            .collect();
        out.sort_unstable();
        out
    }

    /// Refined set `R*(i, k)`, always containing `i`.
    pub fn refined(&self, i: usize, k: usize) -> BTreeSet<usize> {
        let base = self.reciprocal(i, k);
        self.refine_with(i, &base, |q| self.reciprocal(q, k / 2))
    }

    fn refine_with(&self, i: usize, base: &[usize], half: impl Fn(usize) -> Vec<usize>) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = base.iter().copied().collect();
        out.insert(i);
        for &q in base {
            let candidate = half(q);
            let overlap = candidate.iter().filter(|c| base.binary_search(c).is_ok()).count();
            if 3 * overlap >= 2 * candidate.len() {
                out.extend(candidate);
            }
        }
        out
    }

    /// Refined sets for all samples.
    pub fn refined_all(&self, k: usize) -> Vec<BTreeSet<usize>> {
        let n = self.n();
        let full: Vec<Vec<usize>> = (0..n).map(|i| self.reciprocal(i, k)).collect();
        let half: Vec<Vec<usize>> = (0..n).map(|i| self.reciprocal(i, k / 2)).collect();
        (0..n)
            .map(|i| self.refine_with(i, &full[i], |q| half[q].clone()))
            .collect()
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(format!("k = {k} must satisfy 1 <= k < n = {n}")));
    }
    Ok(())
}

pub fn k_reciprocal_set(d: &DistanceMatrix, i: usize, k: usize) -> Result<BTreeSet<usize>> {
    check_k(d.n(), k)?;
    if i >= d.n() {
        return Err(Error::InvalidConfig(format!("index {i} out of range for n = {}", d.n())));
    }
    Ok(NeighborIndex::new(d).refined(i, k))
}

pub fn similarity_matrix(x: ArrayView2<'_, f64>, k: usize) -> Result<SimilarityMatrix> {
    let d = pairwise_sq_euclidean(x)?;
    similarity_from_distances(&d, k)
}

/// Builds the similarity matrix from squared Euclidean distances.
pub fn similarity_from_distances(d: &DistanceMatrix, k: usize) -> Result<SimilarityMatrix> {
    let n = d.n();
    check_k(n, k)?;
    let index = NeighborIndex::new(d);
    let mut m = Array2::zeros((n, n));
    for (i, set) in index.refined_all(k).into_iter().enumerate() {
        for j in set {
            m[[i, j]] = (-d.get(i, j)).exp();
        }
    }
    Ok(SimilarityMatrix { values: m })
}

/// Weighted Jaccard distance between similarity rows.
///
/// Rows are sparse (only refined-set members are nonzero), so the min-sum is
/// taken over the common support and the max-sum follows from
/// `sum(max) = sum(a) + sum(b) - sum(min)`.
pub fn jaccard_distance(m: &SimilarityMatrix) -> Result<DistanceMatrix> {
    let n = m.n();
    let support: Vec<Vec<(usize, f64)>> = m
        .values
        .rows()
        .into_iter()
        .map(|row| row.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(j, &v)| (j, v)).collect())
        .collect();
    let row_sums: Vec<f64> = support.iter().map(|s| s.iter().map(|&(_, v)| v).sum()).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let min_sum = sparse_min_sum(&support[i], &support[j]);
            let max_sum = row_sums[i] + row_sums[j] - min_sum;
            if max_sum <= 0.0 {
                return Err(Error::Internal(format!("similarity rows {i} and {j} are both empty")));
            }
            let v = (1.0 - min_sum / max_sum).clamp(0.0, 1.0);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(DistanceMatrix::from_raw(out))
}

fn sparse_min_sum(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut p, mut q, mut acc) = (0, 0, 0.0);
    while p < a.len() && q < b.len() {
        match a[p].0.cmp(&b[q].0) {
            std::cmp::Ordering::Less => p += 1,
            std::cmp::Ordering::Greater => q += 1,
            std::cmp::Ordering::Equal => {
                acc += a[p].1.min(b[q].1);
                p += 1;
                q += 1;
            }
        }
    }
    acc
}

/// `1 - exp(-||x - nearest source||^2)` per target row.
pub fn source_proximity(target: ArrayView2<'_, f64>, source: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if source.nrows() == 0 {
        return Err(Error::Empty("source embeddings"));
    }
    if target.nrows() == 0 {
        return Err(Error::Empty("target embeddings"));
    }
    if target.ncols() != source.ncols() {
        return Err(Error::Shape(format!(
            "target dim {} vs source dim {}",
            target.ncols(),
            source.ncols()
        )));
    }
    if target.iter().chain(source.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings"));
    }
    Ok(target
        .rows()
        .into_iter()
        .map(|t| {
            let nearest = source
                .rows()
                .into_iter()
                .map(|s| t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            -(-nearest).exp_m1()
        })
        .collect())
}

/// `lambda * (w_i + w_j) + (1 - lambda) * d_J(i, j)` off the diagonal.
pub fn clustering_distance(jaccard: &DistanceMatrix, proximity: &Array1<f64>, lambda: f64) -> Result<DistanceMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let n = jaccard.n();
    if proximity.len() != n {
        return Err(Error::Shape(format!("{} proximity terms for {n} samples", proximity.len())));
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = lambda * (proximity[i] + proximity[j]) + (1.0 - lambda) * jaccard.get(i, j);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(DistanceMatrix::from_raw(out))
}

fn write_matrix_csv<W: Write>(m: &Array2<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
