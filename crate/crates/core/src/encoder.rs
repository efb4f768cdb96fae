//! Small embedding encoder trained with hand-derived gradients.
//!
//! The encoder is a stack of affine layers (optionally ReLU between them) with
//! an optional softmax classifier head used only for source training. Losses
//! are batch-hard triplet (summed over anchors, Euclidean norms) and softmax
//! cross-entropy (averaged). Mined positive/negative indices are constants of
//! the forward pass when differentiating.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use crate::rng::std_normal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `classes x embedding`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Encoder weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub head: Option<ClassifierHead>,
}

impl EncoderParams {
    /// Gaussian init with variance `gain / fan_in`, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden: Option<usize>, embed_dim: usize, n_classes: Option<usize>, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        if let Some(h) = hidden {
            layers.push(Layer {
                weight: gaussian((h, fan_in), (2.0 / fan_in as f64).sqrt(), rng),
                bias: Array1::zeros(h),
                activation: Activation::Relu,
            });
            fan_in = h;
        }
        layers.push(Layer {
            weight: gaussian((embed_dim, fan_in), (1.0 / fan_in as f64).sqrt(), rng),
            bias: Array1::zeros(embed_dim),
            activation: Activation::Identity,
        });
        let head = n_classes.map(|c| ClassifierHead {
            weight: gaussian((c, embed_dim), (1.0 / embed_dim as f64).sqrt(), rng),
            bias: Array1::zeros(c),
        });
        EncoderParams { layers, head }
    }

    /// Single linear layer `x -> x` (square).
    pub fn identity(dim: usize) -> Self {
        EncoderParams {
            layers: vec![Layer {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
                activation: Activation::Identity,
            }],
            head: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("encoder has no layers".into()));
        }
        let mut width = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.ncols() != width || l.bias.len() != l.weight.nrows() {
                return Err(Error::Shape(format!("layer {i} does not chain from width {width}")));
            }
            width = l.weight.nrows();
        }
        if let Some(h) = &self.head {
            if h.weight.ncols() != width || h.bias.len() != h.weight.nrows() {
                return Err(Error::Shape("classifier head does not match the embedding width".into()));
            }
        }
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        self.with_flat(&vec![0.0; self.n_params()])
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.head.as_ref().map_or(0, |h| h.weight.len() + h.bias.len())
    }

    /// Layer weights and biases in order, then the head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        if let Some(h) = &self.head {
            out.extend(h.weight.iter());
            out.extend(h.bias.iter());
        }
        out
    }

    /// Same shapes as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for l in &mut out.layers {
            l.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        if let Some(h) = &mut out.head {
            h.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            h.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        out
    }

    pub fn without_head(&self) -> Self {
        EncoderParams {
            layers: self.layers.clone(),
            head: None,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }
}

const CHECKPOINT_FORMAT: &str = "act-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: EncoderParams,
}

fn gaussian<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * std_normal(rng))
}

/// Per-layer inputs and pre-activations kept for the backward pass.
struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn check_input(params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<()> {
    if params.layers.is_empty() {
        return Err(Error::Shape("encoder has no layers".into()));
    }
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, encoder expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn forward_cached(params: &EncoderParams, x: ArrayView2<'_, f64>) -> (Array2<f64>, ForwardCache) {
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(params.layers.len()),
        pre: Vec::with_capacity(params.layers.len()),
    };
    let mut a = x.to_owned();
    for l in &params.layers {
        let z = a.dot(&l.weight.t()) + &l.bias;
        let out = match l.activation {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        };
        cache.inputs.push(a);
        cache.pre.push(z);
        a = out;
    }
    (a, cache)
}

pub fn forward(params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_input(params, x)?;
    Ok(forward_cached(params, x).0)
}

/// Accumulates layer gradients into `grads` given `d loss / d embedding`.
fn backward(params: &EncoderParams, cache: &ForwardCache, d_emb: Array2<f64>, grads: &mut EncoderParams) {
    let mut d_a = d_emb;
    for (li, l) in params.layers.iter().enumerate().rev() {
        let d_z = match l.activation {
            Activation::Identity => d_a,
            Activation::Relu => {
                let mut dz = d_a;
                dz.zip_mut_with(&cache.pre[li], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz
            }
        };
        let g = &mut grads.layers[li];
        g.weight += &d_z.t().dot(&cache.inputs[li]);
        g.bias += &d_z.sum_axis(Axis(0));
        if li > 0 {
            d_a = d_z.dot(&l.weight);
        } else {
            break;
        }
    }
}

/// Per-anchor losses of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossReport {
    pub total_loss: f64,
    pub per_anchor_losses: Vec<f64>,
}

/// Hardest positive and negative mined for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTriplet {
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
    pub loss: f64,
}

/// Batch-hard mining over Euclidean distances. An anchor with no positive or
/// no negative in the batch yields `None`. When `keys` is given, rows sharing
/// the anchor's key (the same underlying sample drawn twice) are not
/// positives. Ties go to the lowest index.
pub fn mine_batch_hard(emb: ArrayView2<'_, f64>, labels: &[usize], keys: Option<&[usize]>, margin: f64) -> Vec<Option<AnchorTriplet>> {
    let b = emb.nrows();
    let dist = |i: usize, j: usize| -> f64 {
        emb.row(i)
            .iter()
            .zip(emb.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    (0..b)
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = dist(a, j);
                if labels[j] == labels[a] {
                    if keys.is_some_and(|k| k[j] == k[a]) {
                        continue;
                    }
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            let ((p, d_ap), (n, d_an)) = (pos?, neg?);
            Some(AnchorTriplet {
                positive: p,
                negative: n,
                d_ap,
                d_an,
                loss: (d_ap - d_an + margin).max(0.0),
            })
        })
        .collect()
}

fn check_pk_structure(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::BatchStructure("batch needs at least two labels".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::BatchStructure(format!("label {l} has a single instance")));
    }
    Ok(())
}

/// Batch-hard triplet loss of a P x K batch.
pub fn triplet_loss_batch(emb: ArrayView2<'_, f64>, labels: &[usize], margin: f64) -> Result<BatchLossReport> {
    if labels.len() != emb.nrows() {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), emb.nrows())));
    }
    check_pk_structure(labels)?;
    let mined = mine_batch_hard(emb, labels, None, margin);
    let per_anchor_losses: Vec<f64> = mined.iter().map(|t| t.expect("pk batch").loss).collect();
    Ok(BatchLossReport {
        total_loss: per_anchor_losses.iter().sum(),
        per_anchor_losses,
    })
}

/// `d total / d embedding` for the mined triplets with an active hinge.
fn triplet_embedding_grad(emb: ArrayView2<'_, f64>, mined: &[Option<AnchorTriplet>]) -> Array2<f64> {
    let mut g = Array2::zeros(emb.raw_dim());
    for (a, t) in mined.iter().enumerate() {
        let Some(t) = t else { continue };
        if t.loss <= 0.0 {
            continue;
        }
        if t.d_ap > 0.0 {
            let u = (&emb.row(a) - &emb.row(t.positive)) / t.d_ap;
            g.row_mut(a).scaled_add(1.0, &u);
            g.row_mut(t.positive).scaled_add(-1.0, &u);
        }
        if t.d_an > 0.0 {
            let u = (&emb.row(a) - &emb.row(t.negative)) / t.d_an;
            g.row_mut(a).scaled_add(-1.0, &u);
            g.row_mut(t.negative).scaled_add(1.0, &u);
        }
    }
    g
}

/// Gradient of the batch-hard triplet loss of a P x K batch.
pub fn grad(params: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize], margin: f64) -> Result<(BatchLossReport, EncoderParams)> {
    check_input(params, x)?;
    if labels.len() != x.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    check_pk_structure(labels)?;
    let out = triplet_loss_and_grad(params, x, labels, None, margin);
    Ok((out.report, out.grads))
}

/// Result of a lenient triplet evaluation over an arbitrary batch.
pub struct TripletOutcome {
    /// Anchors without a valid triplet contribute 0.
    pub report: BatchLossReport,
    pub mined: Vec<Option<AnchorTriplet>>,
    pub grads: EncoderParams,
}

impl TripletOutcome {
    pub fn n_valid_anchors(&self) -> usize {
        self.mined.iter().filter(|t| t.is_some()).count()
    }
}

/// Triplet loss and gradient on any batch; anchors lacking a positive or a
/// negative are skipped instead of rejected.
pub fn triplet_loss_and_grad(params: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize], keys: Option<&[usize]>, margin: f64) -> TripletOutcome {
    let (emb, cache) = forward_cached(params, x);
    let mined = mine_batch_hard(emb.view(), labels, keys, margin);
    let per_anchor_losses: Vec<f64> = mined.iter().map(|t| t.map_or(0.0, |t| t.loss)).collect();
    let mut grads = params.zeros_like();
    let d_emb = triplet_embedding_grad(emb.view(), &mined);
    backward(params, &cache, d_emb, &mut grads);
    TripletOutcome {
        report: BatchLossReport {
            total_loss: per_anchor_losses.iter().sum(),
            per_anchor_losses,
        },
        mined,
        grads,
    }
}

fn softmax_ce(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut d = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[i]];
        for (c, &v) in row.iter().enumerate() {
            d[[i, c]] = (v - lse).exp() / b;
        }
        d[[i, labels[i]]] -= 1.0 / b;
    }
    (loss / b, d)
}

fn check_head<'a>(params: &'a EncoderParams, labels: &[usize]) -> Result<&'a ClassifierHead> {
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("cross-entropy needs a classifier head".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= head.weight.nrows()) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} outside the {} head classes",
            head.weight.nrows()
        )));
    }
    Ok(head)
}

/// Mean softmax cross-entropy of the classifier head and its gradient.
pub fn ce_loss_and_grad(params: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, EncoderParams)> {
    check_input(params, x)?;
    let head = check_head(params, labels)?;
    if labels.len() != x.nrows() || labels.is_empty() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    let (emb, cache) = forward_cached(params, x);
    let logits = emb.dot(&head.weight.t()) + &head.bias;
    let (loss, d_logits) = softmax_ce(&logits, labels);
    let mut grads = params.zeros_like();
    let gh = grads.head.as_mut().expect("head");
    gh.weight += &d_logits.t().dot(&emb);
    gh.bias += &d_logits.sum_axis(Axis(0));
    backward(params, &cache, d_logits.dot(&head.weight), &mut grads);
    Ok((loss, grads))
}

/// Triplet (summed) plus cross-entropy (averaged) in one pass, for source
/// training. Returns `(triplet, ce, grads)`.
pub fn joint_loss_and_grad(params: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize], keys: Option<&[usize]>, margin: f64) -> Result<(f64, f64, EncoderParams)> {
    check_input(params, x)?;
    let head = check_head(params, labels)?;
    let (emb, cache) = forward_cached(params, x);
    let mined = mine_batch_hard(emb.view(), labels, keys, margin);
    let triplet: f64 = mined.iter().map(|t| t.map_or(0.0, |t| t.loss)).sum();
    let logits = emb.dot(&head.weight.t()) + &head.bias;
    let (ce, d_logits) = softmax_ce(&logits, labels);
    let mut grads = params.zeros_like();
    let gh = grads.head.as_mut().expect("head");
    gh.weight += &d_logits.t().dot(&emb);
    gh.bias += &d_logits.sum_axis(Axis(0));
    let d_emb = triplet_embedding_grad(emb.view(), &mined) + d_logits.dot(&head.weight);
    backward(params, &cache, d_emb, &mut grads);
    Ok((triplet, ce, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k_inst: usize,
    /// Source-training learning rate.
    pub lr_source: f64,
    /// Clustering-adaptation learning rate.
    pub lr_adapt: f64,
    /// Co-teaching learning rate.
    pub lr_coteach: f64,
    pub embed_dim: usize,
    /// Width of the optional ReLU hidden layer.
    pub hidden_dim: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.3,
            p: 16,
            k_inst: 4,
            lr_source: 3e-4,
            lr_adapt: 6e-5,
            lr_coteach: 6e-5,
            embed_dim: 32,
            hidden_dim: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k_inst
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.margin.is_finite() && self.margin >= 0.0, || format!("train.margin must be >= 0, got {}", self.margin))?;
        ensure(self.p >= 2, || format!("train.p must be >= 2 (negatives need two identities), got {}", self.p))?;
        ensure(self.k_inst >= 2, || format!("train.k_inst must be >= 2 (positives need two instances), got {}", self.k_inst))?;
        for (name, lr) in [("lr_source", self.lr_source), ("lr_adapt", self.lr_adapt), ("lr_coteach", self.lr_coteach)] {
            ensure(lr.is_finite() && lr > 0.0, || format!("train.{name} must be > 0, got {lr}"))?;
        }
        ensure(self.embed_dim >= 1, || "train.embed_dim must be >= 1".into())?;
        ensure(self.hidden_dim != Some(0), || "train.hidden_dim must be >= 1 when set".into())
    }
}

/// `p` distinct identities with `k_inst` rows each, as indices into `labels`.
/// Identities with fewer than `k_inst` rows contribute all of them, padded by
/// draws with replacement.
pub fn pk_sample<R: Rng>(labels: &[usize], p: usize, k_inst: usize, rng: &mut R) -> Result<Vec<usize>> {
    pk_sample_preferring(labels, p, k_inst, &[], rng)
}

/// Like [`pk_sample`], but identities listed in `preferred` are taken first
/// (in random order), and the remaining slots are filled uniformly.
pub fn pk_sample_preferring<R: Rng>(labels: &[usize], p: usize, k_inst: usize, preferred: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k_inst == 0 {
        return Err(Error::InvalidConfig("P and K must be >= 1".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < p {
        return Err(Error::BatchStructure(format!(
            "{} identities available, {p} requested",
            groups.len()
        )));
    }
    let mut chosen: Vec<usize> = preferred
        .iter()
        .copied()
        .filter(|l| groups.contains_key(l))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    chosen.shuffle(rng);
    chosen.truncate(p);
    let mut rest: Vec<usize> = groups.keys().copied().filter(|l| !chosen.contains(l)).collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(p - chosen.len()));

    let mut batch = Vec::with_capacity(p * k_inst);
    for id in chosen {
        let members = &groups[&id];
        if members.len() >= k_inst {
            batch.extend(members.choose_multiple(rng, k_inst).copied());
        } else {
            batch.extend(members.iter().copied());
            for _ in members.len()..k_inst {
                batch.push(*members.choose(rng).expect("nonempty"));
            }
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, flattened like [`EncoderParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let n = params.n_params();
        AdamState {
            config: AdamConfig::default(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn opt_step(state: &AdamState, params: &EncoderParams, grads: &EncoderParams, lr: f64) -> (AdamState, EncoderParams) {
    let AdamConfig { beta1, beta2, eps } = state.config;
    let g = grads.flatten();
    let mut theta = params.flatten();
    assert_eq!(g.len(), theta.len(), "gradient shape");
    let t = state.t + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    (
        AdamState {
            config: state.config,
            m,
            v,
            t,
        },
        params.with_flat(&theta),
    )
}

/// A model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainee {
    pub params: EncoderParams,
    pub adam: AdamState,
}

impl Trainee {
    pub fn new(params: EncoderParams) -> Self {
        let adam = AdamState::new(&params);
        Trainee { params, adam }
    }

    pub fn apply(&mut self, grads: &EncoderParams, lr: f64) {
        let (adam, params) = opt_step(&self.adam, &self.params, grads, lr);
        self.adam = adam;
        self.params = params;
    }
}
