//! Brute-force references and the statistical checks built on them. Shared
//! by the core test targets and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use act_core::adapt::LabeledPool;
use act_core::cluster::dbscan;
use act_core::coteach::{anchor_losses, ratio_at, select_small_loss};
use act_core::encoder::{ce_loss_and_grad, forward, mine_batch_hard, triplet_loss_and_grad, Activation, EncoderParams};
use act_core::metric::{jaccard_distance, k_reciprocal_set, pairwise_sq_euclidean, similarity_matrix, DistanceMatrix, SimilarityMatrix};
use act_core::rng::{std_normal, stream, Rng};

/// `Ok(summary)` when a check holds, `Err(summary)` otherwise.
pub type Check = Result<String, String>;

pub fn verdict(ok: bool, summary: String) -> Check {
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

pub fn gaussian_points(n: usize, d: usize, scale: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || scale * std_normal(rng))
}

// ---------------------------------------------------------------- metric

pub fn sq_dist_ref(x: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d[i][j] = (0..x.ncols()).map(|c| (x[[i, c]] - x[[j, c]]).powi(2)).sum();
            }
        }
    }
    d
}

/// The `k` nearest of `i`, excluding `i`, ties by index.
pub fn knn_ref(d: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut js: Vec<usize> = (0..d.len()).filter(|&j| j != i).collect();
    js.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
    js.truncate(k);
    js
}

pub fn reciprocal_ref(d: &[Vec<f64>], i: usize, k: usize) -> BTreeSet<usize> {
    knn_ref(d, i, k)
        .into_iter()
        .filter(|&j| knn_ref(d, j, k).contains(&i))
        .collect()
}

pub fn refined_ref(d: &[Vec<f64>], i: usize, k: usize) -> BTreeSet<usize> {
    let base = reciprocal_ref(d, i, k);
    let mut out = base.clone();
    out.insert(i);
    for &q in &base {
        let half = reciprocal_ref(d, q, k / 2);
        let overlap = half.intersection(&base).count() as f64;
        if overlap >= 2.0 / 3.0 * half.len() as f64 {
            out.extend(half);
        }
    }
    out
}

pub fn similarity_ref(x: ArrayView2<'_, f64>, k: usize) -> Vec<Vec<f64>> {
    let d = sq_dist_ref(x);
    let n = d.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in refined_ref(&d, i, k) {
            m[i][j] = (-d[i][j]).exp();
        }
    }
    m
}

pub fn jaccard_ref(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mut lo, mut hi) = (0.0, 0.0);
            for c in 0..n {
                lo += m[i][c].min(m[j][c]);
                hi += m[i][c].max(m[j][c]);
            }
            out[i][j] = 1.0 - lo / hi;
        }
    }
    out
}

fn max_abs_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}

/// Each metric operation against its reference on `instances` random point sets.
pub fn check_metric_chain(instances: usize, seed: u64) -> Check {
    let mut rng = stream(seed, 900);
    let mut worst = 0.0f64;
    for t in 0..instances {
        let n = rng.random_range(3..=30);
        let dim = rng.random_range(1..=5);
        let k = rng.random_range(1..n);
        let x = gaussian_points(n, dim, rng.random_range(0.2..1.5), &mut rng);
        let d_ref = sq_dist_ref(x.view());
        let d = pairwise_sq_euclidean(x.view()).unwrap();
        worst = worst.max(max_abs_diff(d.values(), &d_ref));
        for i in 0..n {
            let got = k_reciprocal_set(&d, i, k).unwrap();
            if got != refined_ref(&d_ref, i, k) {
                return Err(format!("instance {t}: refined set of {i} (k={k}) differs"));
            }
        }
        let m_ref = similarity_ref(x.view(), k);
        let m = similarity_matrix(x.view(), k).unwrap();
        worst = worst.max(max_abs_diff(m.values(), &m_ref));
        let j = jaccard_distance(&m).unwrap();
        worst = worst.max(max_abs_diff(j.values(), &jaccard_ref(&m_ref)));
    }
    verdict(worst <= 1e-9, format!("{instances} instances, max abs deviation {worst:.2e}"))
}

/// A random valid similarity matrix: unit diagonal, sparse positive rows.
pub fn random_similarity(n: usize, rng: &mut Rng) -> SimilarityMatrix {
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = 1.0;
        for j in 0..n {
            if i != j && rng.random_bool(0.4) {
                m[[i, j]] = rng.random_range(1e-3..=1.0);
            }
        }
    }
    SimilarityMatrix::new(m).unwrap()
}

pub fn check_jaccard_properties(instances: usize, seed: u64) -> Check {
    let mut rng = stream(seed, 901);
    for t in 0..instances {
        let n = rng.random_range(2..=25);
        let m = random_similarity(n, &mut rng);
        let d = jaccard_distance(&m).unwrap();
        for i in 0..n {
            if d.get(i, i) != 0.0 {
                return Err(format!("instance {t}: nonzero diagonal at {i}"));
            }
            for j in 0..n {
                let v = d.get(i, j);
                if v != d.get(j, i) || !(0.0..=1.0).contains(&v) {
                    return Err(format!("instance {t}: entry ({i},{j}) = {v}"));
                }
            }
        }

        // A duplicated row has distance 0 to its twin; a row moved onto a
        // disjoint support has distance 1 to it.
        let mut v = m.values().clone();
        let (a, b) = (0, n - 1);
        if n >= 2 {
            v[[a, b]] = 1.0;
            let row = v.row(a).to_owned();
            v.row_mut(b).assign(&row);
            let dup = jaccard_distance(&SimilarityMatrix::new(v.clone()).unwrap()).unwrap();
            if dup.get(a, b) != 0.0 {
                return Err(format!("instance {t}: identical rows at distance {}", dup.get(a, b)));
            }
        }
        if n >= 4 {
            let half = n / 2;
            let mut w = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if (i < half) == (j < half) {
                        w[[i, j]] = if i == j { 1.0 } else { rng.random_range(0.0..=1.0) };
                    }
                }
            }
            let dj = jaccard_distance(&SimilarityMatrix::new(w).unwrap()).unwrap();
            if dj.get(0, n - 1) != 1.0 {
                return Err(format!("instance {t}: disjoint rows at distance {}", dj.get(0, n - 1)));
            }
        }
    }
    Ok(format!("{instances} random similarity matrices"))
}

// ---------------------------------------------------------------- dbscan

/// DBSCAN straight from the definitions: core points, transitive closure of
/// core-to-core eps links, border points to the cluster of their
/// lowest-index core neighbor.
pub fn dbscan_ref(d: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = d.len();
    let near = |i: usize, j: usize| d[i][j] <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && (i == j || near(i, j));
        }
    }
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][m] && reach[m][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    // Cluster representative: lowest-index core it is connected to.
    let rep = |c: usize| (0..n).find(|&r| reach[c][r]).unwrap();
    (0..n)
        .map(|i| {
            if core[i] {
                Some(rep(i))
            } else {
                (0..n).find(|&j| core[j] && near(i, j)).map(rep)
            }
        })
        .collect()
}

pub fn check_dbscan(instances: usize, seed: u64) -> Check {
    let mut rng = stream(seed, 902);
    for t in 0..instances {
        let n = rng.random_range(1..=60);
        let dim = rng.random_range(1..=3);
        let x = gaussian_points(n, dim, 1.0, &mut rng);
        let d_ref = sq_dist_ref(x.view());
        let d = DistanceMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| d_ref[i][j])).unwrap();
        let eps = rng.random_range(0.0..1.0);
        let min_pts = rng.random_range(1..=8);
        let got = dbscan(&d, eps, min_pts).unwrap();
        let want = dbscan_ref(&d_ref, eps, min_pts);
        for i in 0..n {
            if got.labels[i].is_none() != want[i].is_none() {
                return Err(format!("instance {t}: outlier status of {i} differs"));
            }
            for j in 0..n {
                let same_got = got.labels[i].is_some() && got.labels[i] == got.labels[j];
                let same_want = want[i].is_some() && want[i] == want[j];
                if same_got != same_want {
                    return Err(format!("instance {t} (n={n}, eps={eps:.3}, min_pts={min_pts}): co-membership of ({i},{j}) differs"));
                }
            }
        }
    }
    Ok(format!("{instances} instances, co-membership identical"))
}

// ---------------------------------------------------------------- gradients

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-4)
}

/// ReLU activity pattern of every hidden unit plus the mined triplets with
/// their hinge states: the loss is smooth wherever these stay fixed.
fn kink_signature(p: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize], margin: f64, with_triplet: bool) -> Vec<i64> {
    let mut sig = Vec::new();
    let mut a = x.to_owned();
    for l in &p.layers {
        let z = a.dot(&l.weight.t()) + &l.bias;
        if l.activation == Activation::Relu {
            sig.extend(z.iter().map(|&v| (v > 0.0) as i64));
            a = z.mapv(|v| v.max(0.0));
        } else {
            a = z;
        }
    }
    if with_triplet {
        for t in mine_batch_hard(a.view(), labels, None, margin) {
            let t = t.unwrap();
            sig.extend([t.positive as i64, t.negative as i64, (t.loss > 0.0) as i64]);
        }
    }
    sig
}

fn triplet_total(p: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize], margin: f64) -> f64 {
    let emb = forward(p, x).unwrap();
    mine_batch_hard(emb.view(), labels, None, margin).iter().map(|t| t.unwrap().loss).sum()
}

/// Central finite differences for both losses over `draws` random
/// (params, batch) pairs. Coordinates whose perturbation changes a ReLU
/// pattern, a mined index or a hinge state are skipped.
pub fn check_gradients(draws: usize, seed: u64) -> Check {
    let (h, margin) = (1e-5, 0.3);
    let mut rng = stream(seed, 903);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..draws {
        let (d_in, hidden, emb, classes) = (5, rng.random_range(3..=8), 4, 6);
        let hidden = rng.random_bool(0.5).then_some(hidden);
        let params = EncoderParams::init(d_in, hidden, emb, Some(classes), &mut rng);
        let (p, k) = (3, 3);
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let x = gaussian_points(p * k, d_in, 1.0, &mut rng);

        let trip = triplet_loss_and_grad(&params, x.view(), &labels, None, margin).grads.flatten();
        let (_, ce) = ce_loss_and_grad(&params, x.view(), &labels).unwrap();
        let ce = ce.flatten();
        let theta = params.flatten();
        let ce_of = |q: &EncoderParams| ce_loss_and_grad(q, x.view(), &labels).unwrap().0;
        let base_t = kink_signature(&params, x.view(), &labels, margin, true);
        let base_c = kink_signature(&params, x.view(), &labels, margin, false);
        for c in 0..theta.len() {
            let mut up = theta.clone();
            up[c] += h;
            let mut dn = theta.clone();
            dn[c] -= h;
            let (pu, pd) = (params.with_flat(&up), params.with_flat(&dn));

            let stable_t = [&pu, &pd].iter().all(|q| kink_signature(q, x.view(), &labels, margin, true) == base_t);
            if stable_t {
                let fd = (triplet_total(&pu, x.view(), &labels, margin) - triplet_total(&pd, x.view(), &labels, margin)) / (2.0 * h);
                worst = worst.max(rel_err(trip[c], fd));
                checked += 1;
            } else {
                skipped += 1;
            }
            let stable_c = [&pu, &pd].iter().all(|q| kink_signature(q, x.view(), &labels, margin, false) == base_c);
            if stable_c {
                let fd = (ce_of(&pu) - ce_of(&pd)) / (2.0 * h);
                worst = worst.max(rel_err(ce[c], fd));
                checked += 1;
            } else {
                skipped += 1;
            }
        }
    }
    verdict(
        worst < 1e-4 && checked > 10 * skipped,
        format!("{draws} draws, {checked} coordinates checked, {skipped} kink-adjacent skipped, max rel err {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- selection

/// Selection against a full sort on random loss vectors with heavy ties.
pub fn check_selection(instances: usize, seed: u64) -> Check {
    let mut rng = stream(seed, 904);
    for t in 0..instances {
        let b = rng.random_range(1..=80);
        let levels = rng.random_range(1..=6);
        let losses: Vec<f64> = (0..b)
            .map(|_| if rng.random_bool(0.1) { f64::INFINITY } else { rng.random_range(0..levels) as f64 * 0.1 })
            .collect();
        let ratio = if rng.random_bool(0.3) { rng.random_range(1..=10) as f64 / 10.0 } else { rng.random_range(0.01..=1.0) };
        let sel = select_small_loss(&losses, ratio).unwrap();

        let keep = {
            let exact = ratio * b as f64;
            let r = exact.round();
            if (exact - r).abs() < 1e-9 { r as usize } else { exact.ceil() as usize }
        };
        let mut order: Vec<(f64, usize)> = losses.iter().copied().zip(0..).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
        want.sort_unstable();
        if sel.selected_indices != want {
            return Err(format!("instance {t}: b={b}, ratio={ratio}, expected {want:?}, got {:?}", sel.selected_indices));
        }
        let all: BTreeSet<usize> = sel.selected_indices.iter().chain(&sel.rejected_indices).copied().collect();
        if all.len() != b || sel.selected_indices.len() + sel.rejected_indices.len() != b {
            return Err(format!("instance {t}: selection is not a partition"));
        }
    }
    let e3 = 5;
    let (lo, hi) = (ratio_at(0, e3).unwrap(), ratio_at(e3 - 1, e3).unwrap());
    verdict(
        (lo - 0.2).abs() < 1e-12 && hi == 1.0,
        format!("{instances} loss vectors match the sort; ratio_at(0)={lo}, ratio_at(e3-1)={hi}"),
    )
}

/// A batch of `p` identities with `k` instances each around well separated
/// means, a `noise` fraction of them relabeled to another identity.
pub fn noisy_batch(p: usize, k: usize, dim: usize, noise: f64, rng: &mut Rng) -> (Array2<f64>, LabeledPool, Vec<bool>) {
    let means = gaussian_points(p, dim, 1.0, rng);
    let n = p * k;
    let mut x = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let id = i / k;
        for c in 0..dim {
            x[[i, c]] = means[[id, c]] + 0.25 * std_normal(rng);
        }
        labels.push(id);
    }
    let n_wrong = (noise * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut wrong = vec![false; n];
    for &i in &order[..n_wrong] {
        let shift = rng.random_range(1..p);
        labels[i] = (labels[i] + shift) % p;
        wrong[i] = true;
    }
    (x, LabeledPool { indices: (0..n).collect(), labels }, wrong)
}

/// Wrong-label rate among the selected anchors below the rate among the
/// rejected ones, over `trials` batches with 30% wrong labels.
pub fn check_clean_selection(trials: usize, seed: u64) -> Check {
    let mut rng = stream(seed, 905);
    let dim = 8;
    let model = EncoderParams::identity(dim);
    let mut wins = 0;
    for _ in 0..trials {
        let (x, batch, wrong) = noisy_batch(16, 4, dim, 0.3, &mut rng);
        let losses = anchor_losses(&model, &x, &batch, 0.3).unwrap();
        let sel = select_small_loss(&losses, 0.2).unwrap();
        let rate = |idx: &[usize]| idx.iter().filter(|&&i| wrong[i]).count() as f64 / idx.len() as f64;
        if rate(&sel.selected_indices) < rate(&sel.rejected_indices) {
            wins += 1;
        }
    }
    verdict(wins * 10 >= trials * 9, format!("selected set cleaner in {wins}/{trials} trials"))
}

// ---------------------------------------------------------------- statistics

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &t in &idx[i..=j] {
                r[t] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}
