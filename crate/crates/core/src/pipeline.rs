//! End-to-end runs: source training, clustering adaptation, and one of the
//! stage-3 variants, evaluated on the target query/gallery split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_stage2, train_source, AdaptConfig, Monitor, RoundRecord, TargetClusterer};
use crate::cluster::{Backend, ClusterConfig};
use crate::coteach::{run_act, run_ct, run_merged, CoteachConfig, Stage3Outcome};
use crate::datasynth::{generate_domain_pair, split_query_gallery, FeatureSet, SynthConfig};
use crate::encoder::{EncoderParams, TrainConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::Evaluator;
use crate::metric::MetricConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Source model applied to the target as is.
    Direct,
    /// Clustering adaptation only.
    Theory,
    /// Adaptation, then fine-tuning on inliers plus labeled outliers.
    TheoryPlusTo,
    /// Symmetric co-teaching on inliers.
    Ct,
    /// Symmetric co-teaching on inliers plus labeled outliers.
    CtPlusTo,
    /// Asymmetric co-teaching.
    Act,
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] = [
        Pipeline::Direct,
        Pipeline::Theory,
        Pipeline::TheoryPlusTo,
        Pipeline::Ct,
        Pipeline::CtPlusTo,
        Pipeline::Act,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Direct => "direct",
            Pipeline::Theory => "theory",
            Pipeline::TheoryPlusTo => "theory_plus_to",
            Pipeline::Ct => "ct",
            Pipeline::CtPlusTo => "ct_plus_to",
            Pipeline::Act => "act",
        }
    }

    fn has_stage3(self) -> bool {
        !matches!(self, Pipeline::Direct | Pipeline::Theory)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown pipeline `{s}`")))
    }
}

/// Epoch and round counts of the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub e1: usize,
    pub e2: usize,
    pub e3: usize,
    pub r2: usize,
    pub r3: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            e1: 30,
            e2: 5,
            e3: 10,
            r2: 8,
            r3: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub queries_per_identity: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { queries_per_identity: 2 }
    }
}

/// Complete description of a run. `seed` drives data generation, the
/// evaluation split, and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub metric: MetricConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub adapt: Schedule,
    pub coteach: CoteachConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::benchmark()
    }
}

impl RunConfig {
    /// The bundled desk-scale benchmark.
    pub fn benchmark() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig {
                noise_sigma: 0.15,
                camera_scale: 0.5,
                corrupt_scale: 9.0,
                corrupt_frac: 0.25,
                ..SynthConfig::default()
            },
            metric: MetricConfig { k: 10, lambda: 0.1 },
            cluster: ClusterConfig {
                rho: 0.02,
                ..ClusterConfig::default()
            },
            train: TrainConfig {
                lr_source: 1e-2,
                lr_adapt: 5e-3,
                lr_coteach: 2e-3,
                ..TrainConfig::default()
            },
            adapt: Schedule::default(),
            coteach: CoteachConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.adapt_config().validate()?;
        ensure(self.eval.queries_per_identity >= 1, || "eval.queries_per_identity must be >= 1".into())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let s = self.adapt;
        AdaptConfig {
            e1: s.e1,
            e2: s.e2,
            e3: s.e3,
            r2: s.r2,
            r3: s.r3,
            metric: self.metric,
            cluster: self.cluster,
            train: TrainConfig {
                seed: self.seed,
                ..self.train
            },
            coteach: self.coteach,
        }
    }

    /// Source and target sets for this seed.
    pub fn generate(&self) -> Result<(FeatureSet, FeatureSet)> {
        generate_domain_pair(&self.synth_config())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub skipped_queries: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pipeline: Pipeline,
    pub m_src: EncoderParams,
    pub m_ada: Option<EncoderParams>,
    pub stage2: Vec<RoundRecord>,
    pub stage3: Option<Stage3Outcome>,
    pub final_model: EncoderParams,
    pub metrics: FinalMetrics,
}

impl RunOutcome {
    /// Per-round records of every clustering step, stage 2 first.
    pub fn round_records(&self) -> Vec<RoundRecord> {
        let mut all = self.stage2.clone();
        if let Some(s) = &self.stage3 {
            all.extend_from_slice(&s.rounds);
        }
        all
    }
}

/// Runs several pipelines on one dataset, sharing the source model and the
/// clustering adaptation between them. Each result equals the one of a
/// separate run of that pipeline.
pub fn run_pipelines(pipelines: &[Pipeline], source: &FeatureSet, target: &FeatureSet, cfg: &RunConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let adapt = cfg.adapt_config();
    let split = split_query_gallery(target, cfg.eval.queries_per_identity, cfg.seed)?;
    let mut evaluator = Evaluator::new(target, &split);
    let finish = |pipeline, model: &EncoderParams, evaluator: &Evaluator<'_>| -> Result<FinalMetrics> {
        let r = evaluator.retrieval(model)?;
        let at = |k: usize| r.cmc.get(k).copied().unwrap_or(1.0);
        Ok(FinalMetrics {
            pipeline,
            seed: cfg.seed,
            map: r.map,
            rank1: r.rank1(),
            rank5: at(4),
            rank10: at(9),
            skipped_queries: r.skipped,
        })
    };

    let m_src = train_source(source, &adapt)?;
    let mut out = Vec::with_capacity(pipelines.len());
    if pipelines.contains(&Pipeline::Direct) {
        out.push(RunOutcome {
            pipeline: Pipeline::Direct,
            m_src: m_src.clone(),
            m_ada: None,
            stage2: Vec::new(),
            stage3: None,
            final_model: m_src.clone(),
            metrics: finish(Pipeline::Direct, &m_src, &evaluator)?,
        });
    }
    if pipelines.iter().all(|&p| p == Pipeline::Direct) {
        return Ok(out);
    }

    let mut clusterer = TargetClusterer::new(adapt.metric, adapt.cluster, cfg.seed);
    let (m_ada, stage2) = adapt_stage2(&m_src, target.features(), source.features(), &adapt, &mut clusterer, &mut evaluator)?;
    for &p in pipelines.iter().filter(|&&p| p != Pipeline::Direct) {
        let stage3 = if p.has_stage3() {
            let mut cl = clusterer.clone();
            let (t, s) = (target.features(), source.features());
            let m: &mut dyn Monitor = &mut evaluator;
            Some(match p {
                Pipeline::TheoryPlusTo => run_merged(&m_ada, t, s, &adapt, &mut cl, m)?,
                Pipeline::Ct => run_ct(&m_ada, t, s, &adapt, &mut cl, m, false)?,
                Pipeline::CtPlusTo => run_ct(&m_ada, t, s, &adapt, &mut cl, m, true)?,
                Pipeline::Act => run_act(&m_ada, t, s, &adapt, &mut cl, m)?,
                Pipeline::Direct | Pipeline::Theory => unreachable!(),
            })
        } else {
            None
        };
        let final_model = stage3.as_ref().map_or(&m_ada, |s| &s.main).clone();
        out.push(RunOutcome {
            pipeline: p,
            m_src: m_src.clone(),
            m_ada: Some(m_ada.clone()),
            stage2: stage2.clone(),
            metrics: finish(p, &final_model, &evaluator)?,
            stage3,
            final_model,
        });
    }
    // Restore the requested order.
    out.sort_by_key(|o| pipelines.iter().position(|&p| p == o.pipeline));
    Ok(out)
}

pub fn run_pipeline(pipeline: Pipeline, source: &FeatureSet, target: &FeatureSet, cfg: &RunConfig) -> Result<RunOutcome> {
    Ok(run_pipelines(&[pipeline], source, target, cfg)?.remove(0))
}

/// One line of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pipeline: String,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
}

/// The five compared settings plus direct transfer.
pub const TABLE_PIPELINES: [Pipeline; 6] = Pipeline::ALL;

/// Outlier fractions of the k-means variants.
pub const KMEANS_OUTLIER_FRACS: [f64; 2] = [0.2, 0.3];

/// Label of a k-means variant row, e.g. `kmeans_act_u20`.
pub fn kmeans_label(pipeline: Pipeline, u: f64) -> String {
    format!("kmeans_{}_u{}", pipeline.as_str(), (u * 100.0).round() as u32)
}

/// Ablation results of one seed.
#[derive(Debug, Clone)]
pub struct SeedAblation {
    pub rows: Vec<AblationRow>,
    /// Outcomes of the compared pipelines, in `TABLE_PIPELINES` order.
    pub runs: Vec<RunOutcome>,
}

impl SeedAblation {
    pub fn run(&self, pipeline: Pipeline) -> Option<&RunOutcome> {
        self.runs.iter().find(|o| o.pipeline == pipeline)
    }
}

/// Runs every compared pipeline, then the k-means variants (stage-2
/// baseline and ACT) for each outlier fraction, on one seed. Data comes from
/// `data` when given, otherwise it is generated from the config.
pub fn ablate_seed(cfg: &RunConfig, data: Option<(&FeatureSet, &FeatureSet)>) -> Result<SeedAblation> {
    let generated;
    let (source, target) = match data {
        Some(d) => d,
        None => {
            generated = cfg.generate()?;
            (&generated.0, &generated.1)
        }
    };
    let row = |label: String, m: &FinalMetrics| AblationRow {
        pipeline: label,
        seed: cfg.seed,
        map: m.map,
        rank1: m.rank1,
    };
    let runs = run_pipelines(&TABLE_PIPELINES, source, target, cfg)?;
    let mut rows: Vec<AblationRow> = runs.iter().map(|o| row(o.pipeline.as_str().to_string(), &o.metrics)).collect();
    for u in KMEANS_OUTLIER_FRACS {
        let km = RunConfig {
            cluster: ClusterConfig {
                backend: Backend::Kmeans,
                outlier_frac: u,
                ..cfg.cluster
            },
            ..cfg.clone()
        };
        for o in run_pipelines(&[Pipeline::Theory, Pipeline::Act], source, target, &km)? {
            rows.push(row(kmeans_label(o.pipeline, u), &o.metrics));
        }
    }
    Ok(SeedAblation { rows, runs })
}
