//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion that all of them passed. The ablation runs in process through
//! the command-line entry point on the benchmark configuration.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use act_cli::commands::{seed_dir, ABLATION_FILE, ACT_RECORDS_FILE, GATE_TRACE_FILE, ROUND_RECORDS_FILE, SELECTION_TRACE_FILE};
use act_core::adapt::RoundRecord;
use act_core::coteach::{ModelRecord, Role};
use act_core::io::read_records;
use act_core::pipeline::AblationRow;
use common::{median, spearman, verdict, Check};

const SEEDS: u64 = 8;

fn act(args: &[&str]) -> i32 {
    act_cli::run_from(std::iter::once("act").chain(args.iter().copied()))
}

struct Ablation {
    /// Final mAP per pipeline label, one entry per seed.
    map: BTreeMap<String, Vec<f64>>,
    act_records: Vec<Vec<ModelRecord>>,
    stage3_rounds: Vec<Vec<RoundRecord>>,
}

fn load_ablation(dir: &Path) -> Ablation {
    let rows: Vec<AblationRow> = read_records(&dir.join(ABLATION_FILE)).unwrap();
    let mut map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        map.entry(r.pipeline).or_default().push(r.map);
    }
    let (mut act_records, mut stage3_rounds) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let d = dir.join(seed_dir(seed));
        act_records.push(read_records(&d.join(ACT_RECORDS_FILE)).unwrap());
        let rounds: Vec<RoundRecord> = read_records(&d.join(ROUND_RECORDS_FILE)).unwrap();
        stage3_rounds.push(rounds.into_iter().filter(|r| r.stage == 3).collect());
    }
    Ablation { map, act_records, stage3_rounds }
}

fn med(a: &Ablation, label: &str) -> f64 {
    median(&a.map[label])
}

fn pipeline_ordering(a: &Ablation) -> Check {
    let [act, ctto, ct, theory, direct] = ["act", "ct_plus_to", "ct", "theory", "direct"].map(|l| med(a, l));
    verdict(
        act > ctto && ctto >= ct && act > theory && theory > direct,
        format!("median mAP act {act:.4}, ct_plus_to {ctto:.4}, ct {ct:.4}, theory {theory:.4}, direct {direct:.4}"),
    )
}

fn main_beats_collaborator(a: &Ablation) -> Check {
    let (mut wins, mut total) = (0, 0);
    for records in &a.act_records {
        let of = |round: usize, role: Role| records.iter().find(|r| r.round == round && r.model == role).unwrap().map;
        let rounds: std::collections::BTreeSet<usize> = records.iter().map(|r| r.round).collect();
        for r in rounds {
            total += 1;
            wins += (of(r, Role::Main) >= of(r, Role::Co)) as usize;
        }
    }
    verdict(wins * 5 >= total * 4, format!("main >= co in {wins}/{total} (round, seed) pairs"))
}

fn clustering_trends(a: &Ablation) -> Check {
    // A sequence without variation has no trend.
    let trend = |v: Vec<f64>| {
        let idx: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let s = spearman(&idx, &v);
        if s.is_nan() {
            0.0
        } else {
            s
        }
    };
    let f: Vec<f64> = a.stage3_rounds.iter().map(|r| trend(r.iter().map(|x| x.f_score).collect())).collect();
    let o: Vec<f64> = a.stage3_rounds.iter().map(|r| trend(r.iter().map(|x| x.n_outliers as f64).collect())).collect();
    let (mf, mo) = (median(&f), median(&o));
    verdict(mf > 0.5 && mo < -0.5, format!("median Spearman over co-teaching rounds: F-score {mf:.2}, |T_o| {mo:.2}"))
}

fn kmeans_backend(a: &Ablation) -> Check {
    let (act, base) = (med(a, "kmeans_act_u20"), med(a, "kmeans_theory_u20"));
    verdict(act > base, format!("k-means u=0.2 median mAP: act {act:.4} vs baseline {base:.4}"))
}

fn determinism(root: &Path) -> Check {
    let dirs = [root.join("det_a"), root.join("det_b")];
    for d in &dirs {
        let code = act(&["run", "--pipeline", "act", "--seed", "11", "--out", d.to_str().unwrap()]);
        if code != 0 {
            return Err(format!("run exited with {code}"));
        }
    }
    let files = [ROUND_RECORDS_FILE, ACT_RECORDS_FILE, SELECTION_TRACE_FILE, GATE_TRACE_FILE, "final_metrics.json"];
    for f in files {
        if fs::read(dirs[0].join(f)).unwrap() != fs::read(dirs[1].join(f)).unwrap() {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} metric files bit-identical across two runs", files.len()))
}

fn timed(name: &str, results: &mut Vec<(String, Check)>, f: impl FnOnce() -> Check) {
    let start = Instant::now();
    let c = f();
    let secs = start.elapsed().as_secs_f64();
    results.push((name.to_string(), c.map(|s| format!("{s} ({secs:.1}s)")).map_err(|s| format!("{s} ({secs:.1}s)"))));
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    timed("oracle: dbscan", &mut results, || common::check_dbscan(200, 101));
    timed("oracle: metric chain", &mut results, || common::check_metric_chain(100, 102));
    timed("gradients", &mut results, || common::check_gradients(50, 103));
    timed("jaccard properties", &mut results, || common::check_jaccard_properties(100, 104));
    timed("selection contract", &mut results, || common::check_selection(1000, 105));
    timed("clean-selection premise", &mut results, || common::check_clean_selection(100, 106));

    let out = tmp.path().join("ablation");
    let start = Instant::now();
    let code = act(&["ablate", "--seed", "0", "--seeds", &SEEDS.to_string(), "--out", out.to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(code, 0, "ablation failed");
    let ab = load_ablation(&out);
    results.push(("pipeline ordering".into(), pipeline_ordering(&ab).map(|s| format!("{s} ({SEEDS} seeds, ablation {secs:.0}s)"))));
    results.push(("main vs collaborator".into(), main_beats_collaborator(&ab)));
    results.push(("clustering trends".into(), clustering_trends(&ab)));
    results.push(("k-means backend".into(), kmeans_backend(&ab)));
    timed("determinism", &mut results, || determinism(tmp.path()));

    // Straight to the stderr handle so the lines show without --nocapture.
    let mut err = std::io::stderr().lock();
    for (name, r) in &results {
        let _ = match r {
            Ok(s) => writeln!(err, "PASS {name}: {s}"),
            Err(s) => writeln!(err, "FAIL {name}: {s}"),
        };
    }
    let failed: Vec<&str> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| n.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
