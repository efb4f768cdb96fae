//! Co-teaching on clustered target data.
//!
//! Two models are fine-tuned together. Each picks the small-loss part of a
//! batch for the other to learn from, so samples with wrong pseudo labels are
//! kept away from the model being updated. In the asymmetric scheme the main
//! model learns from inliers plus the outliers its collaborator approves,
//! while the collaborator learns only from inliers the main model approves.
//! The symmetric and merge-everything variants are kept for comparison.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt::{finetune, steps_per_epoch, AdaptConfig, LabeledPool, Monitor, RoundRecord, TargetClusterer, TargetClustering};
use crate::encoder::{forward, mine_batch_hard, triplet_loss_and_grad, EncoderParams, TrainConfig, Trainee};
use crate::error::{ensure, Error, Result};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoteachConfig {
    /// Fixed selection ratio in place of the linear schedule.
    pub ratio_override: Option<f64>,
}

impl CoteachConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratio_override {
            ensure(r > 0.0 && r <= 1.0, || format!("coteach.ratio_override must lie in (0, 1], got {r}"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Main,
    Co,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Main => "main",
            Role::Co => "co",
        }
    }
}

/// Outcome of small-loss selection; indices refer to the scored list.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub selected_indices: Vec<usize>,
    pub rejected_indices: Vec<usize>,
    /// Largest selected loss; NaN when nothing was selected.
    pub threshold_loss: f64,
}

/// Fraction of each batch kept at `epoch` (0-based) of an `e3`-epoch round:
/// rises linearly from 0.2 to 1.0.
pub fn ratio_at(epoch: usize, e3: usize) -> Result<f64> {
    ensure(e3 >= 1 && epoch < e3, || format!("epoch {epoch} outside 0..{e3}"))?;
    if e3 == 1 {
        return Ok(1.0);
    }
    Ok(0.2 + 0.8 * epoch as f64 / (e3 - 1) as f64)
}

/// Keeps the `ceil(ratio * n)` smallest losses; ties go to the lower index.
/// Both index lists come back ascending.
pub fn select_small_loss(losses: &[f64], ratio: f64) -> Result<SelectionReport> {
    ensure(ratio > 0.0 && ratio <= 1.0, || format!("selection ratio must lie in (0, 1], got {ratio}"))?;
    let n = losses.len();
    // The tolerance keeps products such as 0.6 * 5 from rounding up past an integer.
    let keep = ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut selected = order[..keep].to_vec();
    let mut rejected = order[keep..].to_vec();
    let threshold_loss = selected.iter().map(|&i| losses[i]).fold(f64::NAN, f64::max);
    selected.sort_unstable();
    rejected.sort_unstable();
    Ok(SelectionReport {
        selected_indices: selected,
        rejected_indices: rejected,
        threshold_loss,
    })
}

/// Per-anchor batch-hard losses of `model` on a batch; anchors without a
/// valid triplet score `+inf` so they are selected last.
pub fn anchor_losses(model: &EncoderParams, features: &Array2<f64>, batch: &LabeledPool, margin: f64) -> Result<Vec<f64>> {
    let x = features.select(Axis(0), &batch.indices);
    let emb = forward(model, x.view())?;
    Ok(mine_batch_hard(emb.view(), &batch.labels, Some(&batch.indices), margin)
        .into_iter()
        .map(|t| t.map_or(f64::INFINITY, |t| t.loss))
        .collect())
}

fn pick(pool: &LabeledPool, positions: &[usize]) -> LabeledPool {
    LabeledPool {
        indices: positions.iter().map(|&i| pool.indices[i]).collect(),
        labels: positions.iter().map(|&i| pool.labels[i]).collect(),
    }
}

/// One triplet update on whatever valid anchors the batch has. Returns false
/// when there were none.
fn train_on(trainee: &mut Trainee, features: &Array2<f64>, batch: &LabeledPool, cfg: &TrainConfig) -> bool {
    if batch.is_empty() {
        return false;
    }
    let x = features.select(Axis(0), &batch.indices);
    let out = triplet_loss_and_grad(&trainee.params, x.view(), &batch.labels, Some(&batch.indices), cfg.margin);
    if out.n_valid_anchors() == 0 {
        return false;
    }
    trainee.apply(&out.grads, cfg.lr_coteach);
    true
}

/// The two co-taught models with their optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct CoteachState {
    pub main: Trainee,
    pub co: Trainee,
}

impl CoteachState {
    pub fn new(init: &EncoderParams) -> Self {
        CoteachState {
            main: Trainee::new(init.clone()),
            co: Trainee::new(init.clone()),
        }
    }
}

/// Main-model update: the collaborator scores the outlier batch (mined
/// together with the inlier batch), and the main model trains on the
/// approved outliers plus all inliers. Returns the selection over `t_o`.
pub fn main_step(state: &mut CoteachState, features: &Array2<f64>, t_o: &LabeledPool, t_i: &LabeledPool, ratio: f64, cfg: &TrainConfig) -> Result<SelectionReport> {
    let candidate = t_o.concat(t_i);
    let losses = anchor_losses(&state.co.params, features, &candidate, cfg.margin)?;
    let sel = select_small_loss(&losses[..t_o.len()], ratio)?;
    let batch = pick(t_o, &sel.selected_indices).concat(t_i);
    train_on(&mut state.main, features, &batch, cfg);
    Ok(sel)
}

/// Peer-selected update: the other model scores `batch` and `updated`
/// trains on the approved part.
pub fn peer_step(state: &mut CoteachState, features: &Array2<f64>, batch: &LabeledPool, updated: Role, ratio: f64, cfg: &TrainConfig) -> Result<SelectionReport> {
    let (selector, learner) = match updated {
        Role::Main => (&state.co, &mut state.main),
        Role::Co => (&state.main, &mut state.co),
    };
    let sel = select_small_loss(&anchor_losses(&selector.params, features, batch, cfg.margin)?, ratio)?;
    train_on(learner, features, &pick(batch, &sel.selected_indices), cfg);
    Ok(sel)
}

/// Collaborator update: the main model scores the inlier batch and the
/// collaborator trains on the approved part.
pub fn collaborator_step(state: &mut CoteachState, features: &Array2<f64>, t_i: &LabeledPool, ratio: f64, cfg: &TrainConfig) -> Result<SelectionReport> {
    peer_step(state, features, t_i, Role::Co, ratio, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub round: usize,
    pub epoch: usize,
    pub iter: usize,
    pub parity: usize,
    pub n_selected: usize,
    pub threshold_loss: f64,
}

/// Which model selected and which one was updated at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateEvent {
    pub round: usize,
    pub epoch: usize,
    pub iter: usize,
    pub selector: Role,
    pub updated: Role,
}

/// Per-model accuracy after one co-teaching round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub round: usize,
    pub model: Role,
    pub map: f64,
    pub rank1: f64,
    pub f_score: f64,
    pub n_outliers: usize,
}

/// Everything a co-teaching (or merged fine-tuning) run produces.
#[derive(Debug, Clone)]
pub struct Stage3Outcome {
    pub main: EncoderParams,
    pub collaborator: Option<EncoderParams>,
    pub rounds: Vec<RoundRecord>,
    pub models: Vec<ModelRecord>,
    pub selections: Vec<SelectionTrace>,
    pub gates: Vec<GateEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scheme {
    Asymmetric,
    Symmetric { include_outliers: bool },
    Merged,
}

/// `n` distinct rows of the pool in random order (all of them when smaller).
fn sample_rows(pool: &LabeledPool, n: usize, rng: &mut Rng) -> LabeledPool {
    let mut pos: Vec<usize> = (0..pool.len()).collect();
    pos.shuffle(rng);
    pos.truncate(n);
    pick(pool, &pos)
}

/// Up to `n` outliers whose pseudo labels occur in `labels`, so that every
/// outlier anchor has positives in the mixed batch.
fn outlier_batch(outliers: &LabeledPool, labels: &[usize], n: usize, rng: &mut Rng) -> LabeledPool {
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let eligible: Vec<usize> = (0..outliers.len()).filter(|&p| present.contains(&outliers.labels[p])).collect();
    sample_rows(&pick(outliers, &eligible), n, rng)
}

struct Recorder {
    round: usize,
    epoch: usize,
    selections: Vec<SelectionTrace>,
    gates: Vec<GateEvent>,
}

impl Recorder {
    fn log(&mut self, iter: usize, selector: Role, updated: Role, sel: &SelectionReport) {
        self.selections.push(SelectionTrace {
            round: self.round,
            epoch: self.epoch,
            iter,
            parity: iter % 2,
            n_selected: sel.selected_indices.len(),
            threshold_loss: sel.threshold_loss,
        });
        self.gates.push(GateEvent {
            round: self.round,
            epoch: self.epoch,
            iter,
            selector,
            updated,
        });
    }
}

/// One asymmetric epoch: even iterations update the main model, odd ones the
/// collaborator. The iteration count covers the inlier pool once.
#[allow(clippy::too_many_arguments)]
fn act_epoch(
    state: &mut CoteachState,
    features: &Array2<f64>,
    inliers: &LabeledPool,
    outliers: &LabeledPool,
    ratio: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
    rec: &mut Recorder,
) -> Result<()> {
    let b = cfg.batch_size();
    for iter in 0..steps_per_epoch(inliers.len(), b) {
        if iter % 2 == 0 {
            let Some(t_i) = inliers.pk_batch(cfg, &[], rng) else { break };
            let t_o = outlier_batch(outliers, &t_i.labels, b, rng);
            let sel = main_step(state, features, &t_o, &t_i, ratio, cfg)?;
            rec.log(iter, Role::Co, Role::Main, &sel);
        } else {
            let Some(t_i) = inliers.pk_batch(cfg, &[], rng) else { break };
            let sel = collaborator_step(state, features, &t_i, ratio, cfg)?;
            rec.log(iter, Role::Main, Role::Co, &sel);
        }
    }
    Ok(())
}

/// One symmetric epoch with the same alternation as the asymmetric one; each
/// model draws its batches from its own stream of the shared pool.
#[allow(clippy::too_many_arguments)]
fn symmetric_epoch(
    state: &mut CoteachState,
    features: &Array2<f64>,
    pool: &LabeledPool,
    n_iters: usize,
    ratio: f64,
    cfg: &TrainConfig,
    rngs: &mut (Rng, Rng),
    rec: &mut Recorder,
) -> Result<()> {
    for iter in 0..n_iters {
        let (updated, selector, rng) = if iter % 2 == 0 { (Role::Main, Role::Co, &mut rngs.0) } else { (Role::Co, Role::Main, &mut rngs.1) };
        let Some(batch) = pool.pk_batch(cfg, &[], rng) else { break };
        let sel = peer_step(state, features, &batch, updated, ratio, cfg)?;
        rec.log(iter, selector, updated, &sel);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_scheme(
    scheme: Scheme,
    init: &EncoderParams,
    target: &Array2<f64>,
    source: &Array2<f64>,
    cfg: &AdaptConfig,
    clusterer: &mut TargetClusterer,
    monitor: &mut dyn Monitor,
) -> Result<Stage3Outcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let mut state = CoteachState::new(init);
    let mut rng = stream(t.seed, 103);
    // The symmetric scheme gives each model its own batch stream.
    let mut sym_rngs = (stream(t.seed, 104), stream(t.seed, 105));
    let mut rec = Recorder {
        round: 0,
        epoch: 0,
        selections: Vec::new(),
        gates: Vec::new(),
    };
    let mut rounds = Vec::with_capacity(cfg.r3);
    let mut models = Vec::new();
    for round in 0..cfg.r3 {
        let clustering: TargetClustering = clusterer.cluster(&state.main.params, target, source)?;
        let inliers = clustering.inlier_pool().trainable();
        if inliers.is_empty() {
            return Err(Error::NoInliers);
        }
        let outliers = clustering.outlier_pool();
        let f_score = monitor.f_score(&clustering.merged_labels())?;
        let n_outliers = clustering.assignment.n_outliers();
        rec.round = round;
        for epoch in 0..cfg.e3 {
            rec.epoch = epoch;
            let ratio = match cfg.coteach.ratio_override {
                Some(r) => r,
                None => ratio_at(epoch, cfg.e3)?,
            };
            match scheme {
                Scheme::Asymmetric => act_epoch(&mut state, target, &inliers, &outliers, ratio, t, &mut rng, &mut rec)?,
                Scheme::Symmetric { include_outliers } => {
                    let pool = if include_outliers { inliers.concat(&outliers).trainable() } else { inliers.clone() };
                    let n_iters = steps_per_epoch(inliers.len(), t.batch_size());
                    symmetric_epoch(&mut state, target, &pool, n_iters, ratio, t, &mut sym_rngs, &mut rec)?;
                }
                Scheme::Merged => {
                    finetune(&mut state.main, target, &inliers.concat(&outliers), 1, t.lr_coteach, t, &mut rng);
                }
            }
        }
        let (map, rank1) = monitor.retrieval(&state.main.params)?;
        rounds.push(RoundRecord {
            stage: 3,
            round,
            f_score,
            n_outliers,
            n_clusters: clustering.assignment.n_clusters,
            map,
            rank1,
        });
        models.push(ModelRecord {
            round,
            model: Role::Main,
            map,
            rank1,
            f_score,
            n_outliers,
        });
        if scheme != Scheme::Merged {
            let (map, rank1) = monitor.retrieval(&state.co.params)?;
            models.push(ModelRecord {
                round,
                model: Role::Co,
                map,
                rank1,
                f_score,
                n_outliers,
            });
        }
        log::info!("stage3 round {round}: {n_outliers} outliers, F {f_score:.3}, mAP(main) {map:.3}");
    }
    Ok(Stage3Outcome {
        main: state.main.params,
        collaborator: (scheme != Scheme::Merged).then_some(state.co.params),
        rounds,
        models,
        selections: rec.selections,
        gates: rec.gates,
    })
}

/// Asymmetric co-teaching for `r3` rounds starting from the adapted model.
/// The main model re-clusters the target at the start of every round.
pub fn run_act(
    m_ada: &EncoderParams,
    target: &Array2<f64>,
    source: &Array2<f64>,
    cfg: &AdaptConfig,
    clusterer: &mut TargetClusterer,
    monitor: &mut dyn Monitor,
) -> Result<Stage3Outcome> {
    run_scheme(Scheme::Asymmetric, m_ada, target, source, cfg, clusterer, monitor)
}

/// Symmetric co-teaching on inliers, or on inliers and labeled outliers.
pub fn run_ct(
    m_ada: &EncoderParams,
    target: &Array2<f64>,
    source: &Array2<f64>,
    cfg: &AdaptConfig,
    clusterer: &mut TargetClusterer,
    monitor: &mut dyn Monitor,
    include_outliers: bool,
) -> Result<Stage3Outcome> {
    run_scheme(Scheme::Symmetric { include_outliers }, m_ada, target, source, cfg, clusterer, monitor)
}

/// Single-model fine-tuning on inliers plus outliers carrying their
/// nearest-inlier labels, with the same round structure.
pub fn run_merged(
    m_ada: &EncoderParams,
    target: &Array2<f64>,
    source: &Array2<f64>,
    cfg: &AdaptConfig,
    clusterer: &mut TargetClusterer,
    monitor: &mut dyn Monitor,
) -> Result<Stage3Outcome> {
    run_scheme(Scheme::Merged, m_ada, target, source, cfg, clusterer, monitor)
}
