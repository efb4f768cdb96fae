//! Source training and clustering-based adaptation.
//!
//! Stage 1 trains the encoder on the labeled source set with triplet plus
//! cross-entropy loss. Stage 2 repeatedly clusters the target embeddings and
//! fine-tunes on the clustered inliers with triplet loss alone; outliers are
//! discarded.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    assign_outlier_labels, compute_eps, dbscan, kmeans_with_outliers, merged_labels, Backend, ClusterAssignment, ClusterConfig, EpsPolicy,
};
use crate::coteach::CoteachConfig;
use crate::datasynth::FeatureSet;
use crate::encoder::{joint_loss_and_grad, pk_sample, triplet_loss_and_grad, EncoderParams, TrainConfig, Trainee};
use crate::error::{ensure, Error, Result};
use crate::eval::{extract, Evaluator};
use crate::metric::{clustering_distance, jaccard_distance, pairwise_sq_euclidean, similarity_from_distances, source_proximity, DistanceMatrix, MetricConfig};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Source-training epochs.
    pub e1: usize,
    /// Fine-tuning epochs per clustering-adaptation round.
    pub e2: usize,
    /// Epochs per co-teaching round.
    pub e3: usize,
    pub r2: usize,
    pub r3: usize,
    pub metric: MetricConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub coteach: CoteachConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            e1: 30,
            e2: 30,
            e3: 10,
            r2: 30,
            r3: 5,
            metric: MetricConfig::default(),
            cluster: ClusterConfig::default(),
            train: TrainConfig::default(),
            coteach: CoteachConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.e2 >= 1 && self.e3 >= 1, || "epochs e2 and e3 must be >= 1".into())?;
        self.metric.validate()?;
        self.cluster.validate()?;
        self.train.validate()?;
        self.coteach.validate()
    }
}

/// Clustering quality and retrieval accuracy after one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 2 for clustering adaptation, 3 for co-teaching.
    pub stage: u8,
    pub round: usize,
    pub f_score: f64,
    pub n_outliers: usize,
    pub n_clusters: usize,
    pub map: f64,
    pub rank1: f64,
}

/// Measures models and clusterings against ground truth. Implemented by the
/// evaluator; adaptation code never sees target identities otherwise.
pub trait Monitor {
    fn f_score(&mut self, merged_labels: &[usize]) -> Result<f64>;
    /// `(mAP, rank-1)`
    fn retrieval(&mut self, params: &EncoderParams) -> Result<(f64, f64)>;
}

impl Monitor for Evaluator<'_> {
    fn f_score(&mut self, merged_labels: &[usize]) -> Result<f64> {
        Evaluator::f_score(self, merged_labels)
    }

    fn retrieval(&mut self, params: &EncoderParams) -> Result<(f64, f64)> {
        let r = Evaluator::retrieval(self, params)?;
        Ok((r.map, r.rank1()))
    }
}

/// Reports zeros; for runs without ground truth.
pub struct Unmonitored;

impl Monitor for Unmonitored {
    fn f_score(&mut self, _: &[usize]) -> Result<f64> {
        Ok(0.0)
    }

    fn retrieval(&mut self, _: &EncoderParams) -> Result<(f64, f64)> {
        Ok((0.0, 0.0))
    }
}

/// Rows of a feature matrix together with their (pseudo) labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPool {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn concat(&self, other: &LabeledPool) -> LabeledPool {
        LabeledPool {
            indices: self.indices.iter().chain(&other.indices).copied().collect(),
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
        }
    }

    /// Drops labels with fewer than two members (no positive pair possible).
    pub fn trainable(&self) -> LabeledPool {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_default() += 1;
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| counts[&self.labels[i]] >= 2).collect();
        LabeledPool {
            indices: keep.iter().map(|&i| self.indices[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn n_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// PK batch drawn from this pool, as `(row indices, labels)`. `None` when
    /// fewer than two labels are available.
    pub fn pk_batch(&self, cfg: &TrainConfig, preferred: &[usize], rng: &mut Rng) -> Option<LabeledPool> {
        let n_labels = self.n_labels();
        if n_labels < 2 {
            return None;
        }
        let p = cfg.p.min(n_labels);
        let pos = crate::encoder::pk_sample_preferring(&self.labels, p, cfg.k_inst, preferred, rng).ok()?;
        Some(LabeledPool {
            indices: pos.iter().map(|&i| self.indices[i]).collect(),
            labels: pos.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// One clustering of the target set.
#[derive(Debug, Clone)]
pub struct TargetClustering {
    pub assignment: ClusterAssignment,
    /// `(sample, nearest-inlier label)` for every outlier.
    pub outlier_labels: Vec<(usize, usize)>,
    pub eps: f64,
}

impl TargetClustering {
    pub fn inlier_pool(&self) -> LabeledPool {
        let indices = self.assignment.inliers();
        let labels = indices.iter().map(|&i| self.assignment.labels[i].expect("inlier")).collect();
        LabeledPool { indices, labels }
    }

    pub fn outlier_pool(&self) -> LabeledPool {
        LabeledPool {
            indices: self.outlier_labels.iter().map(|&(i, _)| i).collect(),
            labels: self.outlier_labels.iter().map(|&(_, l)| l).collect(),
        }
    }

    /// Every sample labeled, outliers through their nearest inlier.
    pub fn merged_labels(&self) -> Vec<usize> {
        merged_labels(&self.assignment, &self.outlier_labels)
    }
}

/// Clusters target embeddings, remembering the density radius across calls
/// when the policy says so.
#[derive(Debug, Clone)]
pub struct TargetClusterer {
    pub metric: MetricConfig,
    pub cluster: ClusterConfig,
    eps: Option<f64>,
    calls: u64,
    seed: u64,
}

impl TargetClusterer {
    pub fn new(metric: MetricConfig, cluster: ClusterConfig, seed: u64) -> Self {
        TargetClusterer {
            metric,
            cluster,
            eps: cluster.eps,
            calls: 0,
            seed,
        }
    }

    pub fn eps(&self) -> Option<f64> {
        self.eps
    }

    pub fn cluster(&mut self, model: &EncoderParams, target: &Array2<f64>, source: &Array2<f64>) -> Result<TargetClustering> {
        let emb_t = extract(model, target)?;
        let emb_s = extract(model, source)?;
        let sq = pairwise_sq_euclidean(emb_t.view())?;
        let d = blended_from_sq(&sq, &emb_t, &emb_s, &self.metric)?;
        let call = self.calls;
        self.calls += 1;
        let (assignment, eps) = match self.cluster.backend {
            Backend::Dbscan => {
                let eps = match (self.cluster.eps, self.eps, self.cluster.eps_policy) {
                    (Some(abs), _, _) => abs,
                    (None, Some(kept), EpsPolicy::FirstRound) => kept,
                    _ => {
                        let est = compute_eps(&d, self.cluster.rho)?;
                        self.eps = Some(est.eps);
                        est.eps
                    }
                };
                (dbscan(&d, eps, self.cluster.min_pts)?, eps)
            }
            Backend::Kmeans => {
                let k = self.cluster.k_means_k.min(emb_t.nrows());
                let seed = self.seed.wrapping_add(call);
                (kmeans_with_outliers(emb_t.view(), k, self.cluster.outlier_frac, seed)?, f64::NAN)
            }
        };
        if assignment.n_clusters == 0 {
            return Err(Error::NoClusters);
        }
        // Low-density samples have (near) empty reciprocal neighborhoods, so
        // their Jaccard distances saturate at 1; the nearest inlier is taken
        // in embedding space instead.
        let outlier_labels = assign_outlier_labels(&sq, &assignment)?;
        Ok(TargetClustering {
            assignment,
            outlier_labels,
            eps,
        })
    }
}

/// Jaccard distance over k-reciprocal neighborhoods blended with the
/// source-proximity term.
pub fn blended_distance(emb_t: &Array2<f64>, emb_s: &Array2<f64>, cfg: &MetricConfig) -> Result<DistanceMatrix> {
    blended_from_sq(&pairwise_sq_euclidean(emb_t.view())?, emb_t, emb_s, cfg)
}

fn blended_from_sq(sq: &DistanceMatrix, emb_t: &Array2<f64>, emb_s: &Array2<f64>, cfg: &MetricConfig) -> Result<DistanceMatrix> {
    let k = cfg.k.min(sq.n() - 1);
    let sim = similarity_from_distances(sq, k)?;
    let dj = jaccard_distance(&sim)?;
    let dw = source_proximity(emb_t.view(), emb_s.view())?;
    clustering_distance(&dj, &dw, cfg.lambda)
}

/// Stateless clustering of the target set: assignment plus a pseudo label for
/// every sample (outliers via their nearest inlier).
pub fn cluster_target(
    model: &EncoderParams,
    target: &Array2<f64>,
    source: &Array2<f64>,
    metric: &MetricConfig,
    cluster: &ClusterConfig,
) -> Result<(ClusterAssignment, Vec<usize>)> {
    let c = TargetClusterer::new(*metric, *cluster, 0).cluster(model, target, source)?;
    let merged = c.merged_labels();
    Ok((c.assignment, merged))
}

pub(crate) fn steps_per_epoch(pool_len: usize, batch: usize) -> usize {
    pool_len.div_ceil(batch).max(1)
}

/// Triplet-only fine-tuning on a pseudo-labeled pool. Returns the mean batch
/// loss, or `None` if the pool cannot form a batch.
pub fn finetune(trainee: &mut Trainee, features: &Array2<f64>, pool: &LabeledPool, epochs: usize, lr: f64, cfg: &TrainConfig, rng: &mut Rng) -> Option<f64> {
    let pool = pool.trainable();
    if pool.n_labels() < 2 {
        log::warn!("pool has fewer than two trainable labels; skipping fine-tuning");
        return None;
    }
    let steps = steps_per_epoch(pool.len(), cfg.batch_size());
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..epochs {
        for _ in 0..steps {
            let batch = pool.pk_batch(cfg, &[], rng)?;
            let x = features.select(Axis(0), &batch.indices);
            let out = triplet_loss_and_grad(&trainee.params, x.view(), &batch.labels, Some(&batch.indices), cfg.margin);
            if out.n_valid_anchors() > 0 {
                trainee.apply(&out.grads, lr);
            }
            total += out.report.total_loss;
            count += 1;
        }
    }
    Some(total / count.max(1) as f64)
}

/// Stage 1: triplet plus cross-entropy on the labeled source set.
pub fn train_source(source: &FeatureSet, cfg: &AdaptConfig) -> Result<EncoderParams> {
    cfg.train.validate()?;
    let groups = source.identity_groups();
    if groups.len() < 2 {
        return Err(Error::InvalidConfig("source needs at least two identities".into()));
    }
    let class_of: BTreeMap<usize, usize> = groups.keys().enumerate().map(|(c, &id)| (id, c)).collect();
    let classes: Vec<usize> = source.identities().iter().map(|id| class_of[id]).collect();
    let t = &cfg.train;
    let params = EncoderParams::init(source.dim(), t.hidden_dim, t.embed_dim, Some(groups.len()), &mut stream(t.seed, 100));
    let mut trainee = Trainee::new(params);
    let mut rng = stream(t.seed, 101);
    let p = t.p.min(groups.len());
    let steps = steps_per_epoch(source.len(), t.batch_size());
    for _ in 0..cfg.e1 {
        for _ in 0..steps {
            let batch = pk_sample(&classes, p, t.k_inst, &mut rng)?;
            let x = source.features().select(Axis(0), &batch);
            let labels: Vec<usize> = batch.iter().map(|&i| classes[i]).collect();
            let (_, _, grads) = joint_loss_and_grad(&trainee.params, x.view(), &labels, Some(&batch), t.margin)?;
            trainee.apply(&grads, t.lr_source);
        }
    }
    Ok(trainee.params)
}

/// Stage 2: `r2` rounds of clustering followed by `e2` epochs of triplet
/// fine-tuning on the inliers. Emits one record per round.
pub fn adapt_stage2(
    m_src: &EncoderParams,
    target: &Array2<f64>,
    source: &Array2<f64>,
    cfg: &AdaptConfig,
    clusterer: &mut TargetClusterer,
    monitor: &mut dyn Monitor,
) -> Result<(EncoderParams, Vec<RoundRecord>)> {
    cfg.validate()?;
    let mut trainee = Trainee::new(m_src.clone());
    let mut rng = stream(cfg.train.seed, 102);
    let mut records = Vec::with_capacity(cfg.r2);
    for round in 0..cfg.r2 {
        let clustering = clusterer.cluster(&trainee.params, target, source)?;
        let inliers = clustering.inlier_pool();
        if inliers.is_empty() {
            return Err(Error::NoInliers);
        }
        let f_score = monitor.f_score(&clustering.merged_labels())?;
        finetune(&mut trainee, target, &inliers, cfg.e2, cfg.train.lr_adapt, &cfg.train, &mut rng);
        let (map, rank1) = monitor.retrieval(&trainee.params)?;
        log::info!(
            "stage2 round {round}: {} clusters, {} outliers, F {f_score:.3}, mAP {map:.3}",
            clustering.assignment.n_clusters,
            clustering.assignment.n_outliers()
        );
        records.push(RoundRecord {
            stage: 2,
            round,
            f_score,
            n_outliers: clustering.assignment.n_outliers(),
            n_clusters: clustering.assignment.n_clusters,
            map,
            rank1,
        });
    }
    Ok((trainee.params, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate_domain_pair, SynthConfig};

    fn tiny() -> (FeatureSet, FeatureSet, AdaptConfig) {
        let synth = SynthConfig {
            n_identities_source: 8,
            n_identities_target: 8,
            samples_per_identity: 6,
            dim: 6,
            ..SynthConfig::default()
        };
        let (s, t) = generate_domain_pair(&synth).unwrap();
        let cfg = AdaptConfig {
            e1: 2,
            e2: 1,
            e3: 1,
            r2: 2,
            r3: 1,
            metric: MetricConfig { k: 6, lambda: 0.1 },
            cluster: ClusterConfig {
                rho: 0.05,
                ..ClusterConfig::default()
            },
            train: TrainConfig {
                p: 4,
                k_inst: 3,
                lr_source: 1e-2,
                lr_adapt: 1e-3,
                embed_dim: 8,
                ..TrainConfig::default()
            },
            ..AdaptConfig::default()
        };
        (s, t, cfg)
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let (s, _, cfg) = tiny();
        let cfg = AdaptConfig { e1: 0, ..cfg };
        let init = EncoderParams::init(s.dim(), None, cfg.train.embed_dim, Some(8), &mut stream(cfg.train.seed, 100));
        assert_eq!(train_source(&s, &cfg).unwrap(), init);
    }

    #[test]
    fn source_training_is_deterministic() {
        let (s, _, cfg) = tiny();
        assert_eq!(train_source(&s, &cfg).unwrap(), train_source(&s, &cfg).unwrap());
    }

    #[test]
    fn identical_targets_form_one_cluster() {
        let (s, _, cfg) = tiny();
        let m = train_source(&s, &cfg).unwrap();
        let target = Array2::from_elem((10, s.dim()), 0.3);
        let metric = MetricConfig { k: 9, lambda: 0.1 };
        let (a, labels) = cluster_target(&m, &target, s.features(), &metric, &cfg.cluster).unwrap();
        assert_eq!(a.n_clusters, 1);
        assert_eq!(a.n_outliers(), 0);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn stage2_with_zero_rounds_is_identity() {
        let (s, t, cfg) = tiny();
        let m = train_source(&s, &cfg).unwrap();
        let cfg0 = AdaptConfig { r2: 0, ..cfg.clone() };
        let mut cl = TargetClusterer::new(cfg.metric, cfg.cluster, 0);
        let (out, recs) = adapt_stage2(&m, t.features(), s.features(), &cfg0, &mut cl, &mut Unmonitored).unwrap();
        assert_eq!(out, m);
        assert!(recs.is_empty());
    }

    #[test]
    fn stage2_emits_one_record_per_round() {
        let (s, t, cfg) = tiny();
        let m = train_source(&s, &cfg).unwrap();
        let mut cl = TargetClusterer::new(cfg.metric, cfg.cluster, 0);
        let (_, recs) = adapt_stage2(&m, t.features(), s.features(), &cfg, &mut cl, &mut Unmonitored).unwrap();
        assert_eq!(recs.len(), cfg.r2);
        assert_eq!(recs.iter().map(|r| r.round).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn trainable_pool_drops_singletons() {
        let pool = LabeledPool {
            indices: vec![10, 11, 12, 13],
            labels: vec![0, 1, 0, 2],
        };
        assert_eq!(pool.trainable(), LabeledPool { indices: vec![10, 12], labels: vec![0, 0] });
    }
}
