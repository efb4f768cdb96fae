//! Two-domain synthetic identity data.
//!
//! Each identity owns a mean drawn uniformly on a sphere of radius `radius`.
//! A sample is its identity mean plus a per-camera offset plus isotropic
//! noise. The target domain additionally goes through a fixed random affine
//! map (Givens rotations, anisotropic scaling, translation) whose magnitude is
//! `shift_scale`, and a `corrupt_frac` fraction of target samples receives
//! heavy noise confined to a random low-rank subspace. Those corrupted samples
//! play the role of occluded or badly lit images: same identity, much harder.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use crate::rng::std_normal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Parse(format!("unknown domain `{other}`"))),
        }
    }
}

/// One row of a [`FeatureSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
    pub domain: Domain,
}

/// Feature matrix with per-sample identity and camera tags.
///
/// Identity tags are ground truth. Adaptation code only ever receives
/// [`FeatureSet::features`]; identities of the target set are read by
/// evaluation alone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    domain: Domain,
    features: Array2<f64>,
    identities: Vec<usize>,
    cameras: Vec<usize>,
}

impl FeatureSet {
    pub fn new(
        domain: Domain,
        features: Array2<f64>,
        identities: Vec<usize>,
        cameras: Vec<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if identities.len() != n || cameras.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows but {} identities and {} cameras",
                identities.len(),
                cameras.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature set"));
        }
        Ok(FeatureSet {
            domain,
            features,
            identities,
            cameras,
        })
    }

    pub fn from_samples(domain: Domain, samples: &[Sample]) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.feature.len());
        let mut features = Array2::zeros((samples.len(), dim));
        for (i, s) in samples.iter().enumerate() {
            if s.feature.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.feature.len()
                )));
            }
            if s.domain != domain {
                return Err(Error::Parse(format!("sample {i} is not in the {} domain", domain.as_str())));
            }
            features.row_mut(i).assign(&ArrayView1::from(&s.feature));
        }
        FeatureSet::new(
            domain,
            features,
            samples.iter().map(|s| s.identity).collect(),
            samples.iter().map(|s| s.camera).collect(),
        )
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    pub fn cameras(&self) -> &[usize] {
        &self.cameras
    }

    pub fn n_identities(&self) -> usize {
        self.identity_groups().len()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            feature: self.features.row(i).to_vec(),
            identity: self.identities[i],
            camera: self.cameras[i],
            domain: self.domain,
        }
    }

    /// Sample indices per identity, identities in ascending order.
    pub fn identity_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.identities.iter().enumerate() {
            groups.entry(id).or_default().push(i);
        }
        groups
    }

    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            domain: self.domain,
            features: self.features.select(ndarray::Axis(0), indices),
            identities: indices.iter().map(|&i| self.identities[i]).collect(),
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities_source: usize,
    pub n_identities_target: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    pub n_cameras: usize,
    /// Magnitude of the target-domain affine map; 0 is the identity map.
    pub shift_scale: f64,
    /// Fraction of target samples that receive heavy low-rank noise.
    pub corrupt_frac: f64,
    pub noise_sigma: f64,
    /// Radius of the sphere holding identity means.
    pub radius: f64,
    /// Per-camera offset scale, in units of `noise_sigma`.
    pub camera_scale: f64,
    /// Corruption noise scale, in units of `noise_sigma`.
    pub corrupt_scale: f64,
    /// Rank of the corruption subspace.
    pub corrupt_rank: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities_source: 50,
            n_identities_target: 50,
            samples_per_identity: 10,
            dim: 16,
            n_cameras: 4,
            shift_scale: 1.0,
            corrupt_frac: 0.15,
            noise_sigma: 0.125,
            radius: 1.0,
            camera_scale: 2.0,
            corrupt_scale: 6.0,
            corrupt_rank: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_identities_source >= 1, || "n_identities_source must be >= 1".into())?;
        ensure(self.n_identities_target >= 1, || "n_identities_target must be >= 1".into())?;
        ensure(self.samples_per_identity >= 1, || "samples_per_identity must be >= 1".into())?;
        ensure(self.dim >= 1, || "dim must be >= 1".into())?;
        ensure(self.n_cameras >= 1, || "n_cameras must be >= 1".into())?;
        ensure(self.shift_scale.is_finite() && self.shift_scale >= 0.0, || {
            format!("shift_scale must be finite and >= 0, got {}", self.shift_scale)
        })?;
        ensure((0.0..=1.0).contains(&self.corrupt_frac), || {
            format!("corrupt_frac must lie in [0, 1], got {}", self.corrupt_frac)
        })?;
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("radius", self.radius),
            ("camera_scale", self.camera_scale),
            ("corrupt_scale", self.corrupt_scale),
        ] {
            ensure(v.is_finite() && v >= 0.0, || format!("{name} must be finite and >= 0, got {v}"))?;
        }
        ensure(self.corrupt_rank >= 1 && self.corrupt_rank <= self.dim, || {
            format!("corrupt_rank must lie in [1, dim], got {}", self.corrupt_rank)
        })?;
        Ok(())
    }
}

/// Generation internals kept for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub source_means: Array2<f64>,
    pub target_means: Array2<f64>,
    /// Target-domain affine map `x -> A x + t`.
    pub shift_matrix: Array2<f64>,
    pub shift_offset: Array1<f64>,
    /// Per target sample: received corruption noise.
    pub corrupted: Vec<bool>,
}

// RNG stream ids, one per independent piece of the generator.
const STREAM_SOURCE_MEANS: u64 = 1;
const STREAM_TARGET_MEANS: u64 = 2;
const STREAM_CAMERAS: u64 = 3;
const STREAM_SHIFT: u64 = 4;
const STREAM_SOURCE_SAMPLES: u64 = 5;
const STREAM_TARGET_SAMPLES: u64 = 6;
const STREAM_CORRUPT: u64 = 7;

pub fn generate_domain_pair(cfg: &SynthConfig) -> Result<(FeatureSet, FeatureSet)> {
    generate_with_truth(cfg).map(|(s, t, _)| (s, t))
}

pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(FeatureSet, FeatureSet, SynthTruth)> {
    cfg.validate()?;
    let d = cfg.dim;

    let source_means = sphere_points(cfg.n_identities_source, d, cfg.radius, &mut stream(cfg.seed, STREAM_SOURCE_MEANS));
    let target_means = sphere_points(cfg.n_identities_target, d, cfg.radius, &mut stream(cfg.seed, STREAM_TARGET_MEANS));

    // Each domain has its own camera network.
    let mut cam_rng = stream(cfg.seed, STREAM_CAMERAS);
    let cam_sigma = cfg.camera_scale * cfg.noise_sigma;
    let source_cams = gaussian_matrix(cfg.n_cameras, d, cam_sigma, &mut cam_rng);
    let target_cams = gaussian_matrix(cfg.n_cameras, d, cam_sigma, &mut cam_rng);

    let (shift_matrix, shift_offset) = random_affine(d, cfg.shift_scale, cfg.radius, &mut stream(cfg.seed, STREAM_SHIFT));

    let mut src_rng = stream(cfg.seed, STREAM_SOURCE_SAMPLES);
    let (src_ids, src_cams) = identity_camera_tags(cfg.n_identities_source, cfg.samples_per_identity, cfg.n_cameras, 0, &mut src_rng);
    let mut source = Array2::zeros((src_ids.len(), d));
    for (i, (&id, &cam)) in src_ids.iter().zip(&src_cams).enumerate() {
        let mut row = source.row_mut(i);
        for c in 0..d {
            let z = std_normal(&mut src_rng);
            row[c] = source_means[[id, c]] + source_cams[[cam, c]] + cfg.noise_sigma * z;
        }
    }

    let offset = cfg.n_identities_source;
    let mut tgt_rng = stream(cfg.seed, STREAM_TARGET_SAMPLES);
    let (tgt_ids, tgt_cams) = identity_camera_tags(cfg.n_identities_target, cfg.samples_per_identity, cfg.n_cameras, offset, &mut tgt_rng);
    let n_t = tgt_ids.len();
    let mut target = Array2::zeros((n_t, d));
    for (i, (&id, &cam)) in tgt_ids.iter().zip(&tgt_cams).enumerate() {
        let clean = &target_means.row(id - offset) + &target_cams.row(cam);
        let mapped = shift_matrix.dot(&clean) + &shift_offset;
        let mut row = target.row_mut(i);
        for c in 0..d {
            let z = std_normal(&mut tgt_rng);
            row[c] = mapped[c] + cfg.noise_sigma * z;
        }
    }

    let mut corrupt_rng = stream(cfg.seed, STREAM_CORRUPT);
    let basis = orthonormal_columns(d, cfg.corrupt_rank, &mut corrupt_rng);
    let n_corrupt = (cfg.corrupt_frac * n_t as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_t).collect();
    order.shuffle(&mut corrupt_rng);
    let mut corrupted = vec![false; n_t];
    let corrupt_sigma = cfg.corrupt_scale * cfg.noise_sigma;
    for &i in order.iter().take(n_corrupt) {
        corrupted[i] = true;
        let w: Array1<f64> = (0..cfg.corrupt_rank)
            .map(|_| corrupt_sigma * std_normal(&mut corrupt_rng))
            .collect();
        let noise = basis.dot(&w);
        let mut row = target.row_mut(i);
        row += &noise;
    }

    let source = FeatureSet::new(Domain::Source, source, src_ids, src_cams)?;
    let target = FeatureSet::new(Domain::Target, target, tgt_ids, tgt_cams)?;
    let truth = SynthTruth {
        source_means,
        target_means,
        shift_matrix,
        shift_offset,
        corrupted,
    };
    Ok((source, target, truth))
}

/// Query/gallery partition of a [`FeatureSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub query_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
}

/// Picks `queries_per_identity` queries per identity; the rest form the
/// gallery. Two gallery samples with distinct cameras are reserved first
/// whenever the identity spans two cameras, so every query keeps a
/// cross-camera match.
pub fn split_query_gallery(set: &FeatureSet, queries_per_identity: usize, seed: u64) -> Result<EvalSplit> {
    let mut rng = stream(seed, 11);
    let mut query_indices = Vec::new();
    let mut gallery_indices = Vec::new();
    for (id, mut members) in set.identity_groups() {
        if members.len() <= queries_per_identity {
            return Err(Error::TooFewSamples {
                identity: id,
                available: members.len(),
                required: queries_per_identity,
            });
        }
        members.shuffle(&mut rng);
        let cams = set.cameras();
        let mut reserved = Vec::with_capacity(2);
        if members.len() - queries_per_identity >= 2 {
            let first = members[0];
            if let Some(&second) = members.iter().find(|&&j| cams[j] != cams[first]) {
                reserved.push(first);
                reserved.push(second);
            }
        } else {
            // A single gallery slot: give it the rarest camera so the queries
            // are most likely to differ from it.
            let mut counts = BTreeMap::new();
            for &j in &members {
                *counts.entry(cams[j]).or_insert(0usize) += 1;
            }
            let &g = members
                .iter()
                .min_by_key(|&&j| (counts[&cams[j]], cams[j]))
                .expect("nonempty");
            reserved.push(g);
        }
        let rest: Vec<usize> = members.iter().copied().filter(|j| !reserved.contains(j)).collect();
        query_indices.extend(&rest[..queries_per_identity]);
        gallery_indices.extend(reserved);
        gallery_indices.extend(&rest[queries_per_identity..]);
    }
    query_indices.sort_unstable();
    gallery_indices.sort_unstable();
    Ok(EvalSplit {
        query_indices,
        gallery_indices,
    })
}

fn sphere_points<R: Rng>(n: usize, d: usize, radius: f64, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((n, d));
    for mut row in out.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = std_normal(rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row *= radius / norm;
                break;
            }
        }
    }
    out
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || sigma * std_normal(rng))
}

/// Identity and camera tags, identity-major. Cameras are uniform per sample;
/// an identity that landed on a single camera gets its last sample moved to
/// the next camera so cross-camera evaluation stays possible.
fn identity_camera_tags<R: Rng>(
    n_ids: usize,
    per_id: usize,
    n_cameras: usize,
    id_offset: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::with_capacity(n_ids * per_id);
    let mut cams = Vec::with_capacity(n_ids * per_id);
    for id in 0..n_ids {
        let start = cams.len();
        for _ in 0..per_id {
            ids.push(id + id_offset);
            cams.push(rng.random_range(0..n_cameras));
        }
        let block = &mut cams[start..];
        if n_cameras > 1 && per_id > 1 && block.iter().all(|&c| c == block[0]) {
            block[per_id - 1] = (block[0] + 1) % n_cameras;
        }
    }
    (ids, cams)
}

/// `A = Q(scale) * diag(exp(scale * g))`, `t = scale * tau`, where `Q` is a
/// product of Givens rotations with angles proportional to `scale`. At
/// `scale == 0` the map is exactly the identity.
fn random_affine<R: Rng>(d: usize, scale: f64, radius: f64, rng: &mut R) -> (Array2<f64>, Array1<f64>) {
    let mut q = Array2::<f64>::eye(d);
    if d >= 2 {
        for _ in 0..2 * d {
            let a = rng.random_range(0..d);
            let mut b = rng.random_range(0..d - 1);
            if b >= a {
                b += 1;
            }
            let z = std_normal(rng);
            let theta = scale * z;
            let (s, c) = theta.sin_cos();
            // q <- q * G(a, b, theta)
            for r in 0..d {
                let qa = q[[r, a]];
                let qb = q[[r, b]];
                q[[r, a]] = c * qa - s * qb;
                q[[r, b]] = s * qa + c * qb;
            }
        }
    }
    let gains: Vec<f64> = (0..d)
        .map(|_| (scale * 0.5 * std_normal(rng)).exp())
        .collect();
    for r in 0..d {
        for (c, g) in gains.iter().enumerate() {
            q[[r, c]] *= g;
        }
    }
    let tau_sigma = radius / (d as f64).sqrt();
    let t: Array1<f64> = (0..d)
        .map(|_| scale * tau_sigma * std_normal(rng))
        .collect();
    (q, t)
}

/// `d x r` matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns<R: Rng>(d: usize, r: usize, rng: &mut R) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((d, r));
    let mut c = 0;
    while c < r {
        let mut v: Array1<f64> = (0..d).map(|_| std_normal(rng)).collect();
        for prev in 0..c {
            let p = basis.column(prev);
            let proj = p.dot(&v);
            v.scaled_add(-proj, &p);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.column_mut(c).assign(&(v / norm));
            c += 1;
        }
    }
    basis
}
