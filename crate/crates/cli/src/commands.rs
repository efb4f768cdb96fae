use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use act_core::datasynth::{split_query_gallery, EvalSplit, FeatureSet};
use act_core::encoder::EncoderParams;
use act_core::eval::Evaluator;
use act_core::io::{read_dataset, write_dataset, write_json, write_records_file};
use act_core::pipeline::{ablate_seed, run_pipeline, Pipeline, RunConfig, RunOutcome, SeedAblation};

use crate::args::{AblateArgs, Command, EvalArgs, RunArgs, SynthArgs};
use crate::config::{output_dir, resolve};
use crate::manifest::RunManifest;
use crate::{Cli, CliError};

pub const DATASET_FILE: &str = "dataset.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const FINAL_METRICS_FILE: &str = "final_metrics.json";
pub const ROUND_RECORDS_FILE: &str = "round_records.csv";
pub const ACT_RECORDS_FILE: &str = "act_records.csv";
pub const SELECTION_TRACE_FILE: &str = "selection_trace.csv";
pub const GATE_TRACE_FILE: &str = "gate_trace.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";

const ROUND_HEADER: &[&str] = &["stage", "round", "f_score", "n_outliers", "n_clusters", "map", "rank1"];
const ACT_HEADER: &[&str] = &["round", "model", "map", "rank1", "f_score", "n_outliers"];
const SELECTION_HEADER: &[&str] = &["round", "epoch", "iter", "parity", "n_selected", "threshold_loss"];
const GATE_HEADER: &[&str] = &["round", "epoch", "iter", "selector", "updated"];
const ABLATION_HEADER: &[&str] = &["pipeline", "seed", "map", "rank1"];

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::Eval(a) => eval(a),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub index: usize,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub skipped_queries: usize,
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, None)?;
    let out = create_out(&a.common.out)?;
    let manifest = RunManifest::new("synth", cfg.clone(), vec![cfg.seed]);
    with_manifest(&out, manifest, |m| {
        let (s, t) = m.timed("generate", || cfg.generate())?;
        let split = split_query_gallery(&t, cfg.eval.queries_per_identity, cfg.seed)?;
        write_dataset(&out.join(DATASET_FILE), &s, &t, &cfg.synth_config())?;
        write_split(&out.join(SPLIT_FILE), &split)?;
        m.outputs.insert("dataset".into(), DATASET_FILE.into());
        m.outputs.insert("dataset_config".into(), "dataset.json".into());
        m.outputs.insert("split".into(), SPLIT_FILE.into());
        Ok(())
    })
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, Some(&a.schedule))?;
    let data = a.data.as_deref().map(existing_input).transpose()?;
    let out = create_out(&a.common.out)?;
    let mut manifest = RunManifest::new("run", cfg.clone(), vec![cfg.seed]);
    manifest.inputs.insert("pipeline".into(), a.pipeline.as_str().into());
    with_manifest(&out, manifest, |m| {
        let (s, t) = dataset(data.as_deref(), &cfg, m)?;
        let outcome = m.timed("pipeline", || run_pipeline(a.pipeline, &s, &t, &cfg))?;
        write_run(&out, &outcome, m)
    })
}

fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, Some(&a.schedule))?;
    if a.seeds == 0 || a.jobs == 0 {
        return Err(CliError::Config("--seeds and --jobs must be >= 1".into()));
    }
    let data = a.data.as_deref().map(existing_input).transpose()?;
    let out = create_out(&a.common.out)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + a.seeds).collect();
    let manifest = RunManifest::new("ablate", cfg.clone(), seeds.clone());
    with_manifest(&out, manifest, |m| {
        let fixed = match &data {
            Some(p) => {
                m.inputs.insert("data".into(), p.display().to_string());
                Some(read_dataset(p)?)
            }
            None => None,
        };
        let results = m.timed("ablate", || {
            run_seeds(&seeds, a.jobs, |seed| {
                let c = RunConfig { seed, ..cfg.clone() };
                let r = ablate_seed(&c, fixed.as_ref().map(|(s, t)| (s, t)));
                log::info!("seed {seed} done");
                r
            })
        });
        let mut rows = Vec::new();
        for (seed, r) in seeds.iter().zip(results) {
            let ab = r?;
            write_seed_records(&out, *seed, &ab, m)?;
            rows.extend(ab.rows);
        }
        write_records_file(&out.join(ABLATION_FILE), &rows, ABLATION_HEADER)?;
        m.metrics.insert("ablation".into(), ABLATION_FILE.into());
        Ok(())
    })
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common, None)?;
    let checkpoint = existing_input(&a.checkpoint)?;
    let data = a.data.as_deref().map(existing_input).transpose()?;
    let out = create_out(&a.common.out)?;
    let mut manifest = RunManifest::new("eval", cfg.clone(), vec![cfg.seed]);
    manifest.inputs.insert("checkpoint".into(), checkpoint.display().to_string());
    with_manifest(&out, manifest, |m| {
        let params = EncoderParams::load_json(&checkpoint)?;
        let (_, t) = dataset(data.as_deref(), &cfg, m)?;
        let split = split_query_gallery(&t, cfg.eval.queries_per_identity, cfg.seed)?;
        let r = m.timed("eval", || Evaluator::new(&t, &split).retrieval(&params))?;
        let at = |k: usize| r.cmc.get(k).copied().unwrap_or(1.0);
        let metrics = EvalMetrics {
            seed: cfg.seed,
            map: r.map,
            rank1: r.rank1(),
            rank5: at(4),
            rank10: at(9),
            skipped_queries: r.skipped,
        };
        write_json(&out.join(EVAL_METRICS_FILE), &metrics)?;
        m.metrics.insert("eval".into(), EVAL_METRICS_FILE.into());
        println!("{}", serde_json::to_string(&metrics).map_err(|e| CliError::Runtime(e.to_string()))?);
        Ok(())
    })
}

/// Runs `body`, then writes the manifest flagged complete or not.
fn with_manifest(dir: &Path, mut m: RunManifest, body: impl FnOnce(&mut RunManifest) -> Result<(), CliError>) -> Result<(), CliError> {
    let result = body(&mut m);
    m.complete = result.is_ok();
    m.error = result.as_ref().err().map(|e| e.to_string());
    m.write(dir)?;
    result
}

fn create_out(out: &Path) -> Result<PathBuf, CliError> {
    let dir = output_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn existing_input(p: &Path) -> Result<PathBuf, CliError> {
    if p.is_file() {
        Ok(p.to_path_buf())
    } else {
        Err(CliError::Config(format!("input file {} does not exist", p.display())))
    }
}

fn dataset(data: Option<&Path>, cfg: &RunConfig, m: &mut RunManifest) -> Result<(FeatureSet, FeatureSet), CliError> {
    match data {
        Some(p) => {
            m.inputs.insert("data".into(), p.display().to_string());
            Ok(m.timed("load", || read_dataset(p))?)
        }
        None => {
            m.inputs.insert("data".into(), "generated".into());
            Ok(m.timed("generate", || cfg.generate())?)
        }
    }
}

fn write_split(path: &Path, split: &EvalSplit) -> act_core::Result<()> {
    let mut rows: Vec<SplitRow> = split
        .query_indices
        .iter()
        .map(|&index| SplitRow { index, role: "query".into() })
        .chain(split.gallery_indices.iter().map(|&index| SplitRow { index, role: "gallery".into() }))
        .collect();
    rows.sort_by_key(|r| r.index);
    write_records_file(path, &rows, &["index", "role"])
}

fn write_run(dir: &Path, o: &RunOutcome, m: &mut RunManifest) -> Result<(), CliError> {
    let mut save = |name: &str, params: &EncoderParams| -> act_core::Result<()> {
        let file = format!("{name}.json");
        params.save_json(&dir.join(&file))?;
        m.checkpoints.insert(name.into(), file);
        Ok(())
    };
    save("m_src", &o.m_src)?;
    if let Some(ada) = &o.m_ada {
        save("m_ada", ada)?;
    }
    if let Some(co) = o.stage3.as_ref().and_then(|s| s.collaborator.as_ref()) {
        save("m_co", co)?;
    }
    save("final", &o.final_model)?;

    write_json(&dir.join(FINAL_METRICS_FILE), &o.metrics)?;
    m.metrics.insert("final".into(), FINAL_METRICS_FILE.into());
    write_round_files(dir, "", o, m)?;
    let (selections, gates) = match &o.stage3 {
        Some(s) => (s.selections.as_slice(), s.gates.as_slice()),
        None => (&[][..], &[][..]),
    };
    write_records_file(&dir.join(SELECTION_TRACE_FILE), selections, SELECTION_HEADER)?;
    write_records_file(&dir.join(GATE_TRACE_FILE), gates, GATE_HEADER)?;
    m.metrics.insert("selection_trace".into(), SELECTION_TRACE_FILE.into());
    m.metrics.insert("gate_trace".into(), GATE_TRACE_FILE.into());
    Ok(())
}

/// `round_records.csv` and `act_records.csv` of one run, written to
/// `out/sub` and registered in the manifest relative to `out`.
fn write_round_files(out: &Path, sub: &str, o: &RunOutcome, m: &mut RunManifest) -> act_core::Result<()> {
    let models = o.stage3.as_ref().map_or(&[][..], |s| s.models.as_slice());
    let dir = out.join(sub);
    write_records_file(&dir.join(ROUND_RECORDS_FILE), &o.round_records(), ROUND_HEADER)?;
    write_records_file(&dir.join(ACT_RECORDS_FILE), models, ACT_HEADER)?;
    for (key, file) in [("round_records", ROUND_RECORDS_FILE), ("act_records", ACT_RECORDS_FILE)] {
        let (key, file) = match sub {
            "" => (key.to_string(), file.to_string()),
            _ => (format!("{sub}/{key}"), format!("{sub}/{file}")),
        };
        m.metrics.insert(key, file);
    }
    Ok(())
}

/// Per-seed records of the ACT run under `seed_<n>/`.
fn write_seed_records(out: &Path, seed: u64, ab: &SeedAblation, m: &mut RunManifest) -> Result<(), CliError> {
    let sub = seed_dir(seed);
    let dir = out.join(&sub);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let act = ab.run(Pipeline::Act).ok_or_else(|| CliError::Runtime("ablation lacks the act run".into()))?;
    write_round_files(out, &sub, act, m)?;
    Ok(())
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

/// Applies `f` to every seed on up to `jobs` threads; results keep seed order.
fn run_seeds<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new(seeds.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let r = f(seed);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every seed ran")).collect()
}
