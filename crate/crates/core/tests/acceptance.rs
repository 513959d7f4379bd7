//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p amtfl --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use amtfl::cli::{run_cli, CliConfig};
use amtfl::harness::{
    amtfl_parameter_count, amtl_parameter_count, run_experiment, scalability_sweep, write_outputs, ExperimentReport,
    ModelReport,
};
use amtfl::losses::{LossConfig, LossKind};
use amtfl::objectives::{
    eval_amtfl, eval_amtl, eval_deep_amtfl, eval_gomtl, eval_stl, Activation, AmtflParams, DeepParams, Hyperparams,
    InterTaskParams, LatentFactorParams,
};
use amtfl::Mat;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-12;
const REDUCTION_FLOOR: f64 = -0.02;
/// Frozen after the pilot recorded in the README; the provisional value was 0.5.
const ASYMMETRY_BOUND: f64 = 1.0;
const PROVISIONAL_ASYMMETRY_BOUND: f64 = 0.5;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) {
    println!("[{}] criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let worst = gradient_check_worst(101, 20);
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let per: Vec<String> = worst.iter().map(|(o, w)| format!("{o} {w:.1e}")).collect();
    Outcome {
        id: "1 gradients",
        pass: max < GRAD_TOL && secs < 30.0,
        detail: format!("max rel err {max:.2e} (< {GRAD_TOL:e}) in {secs:.1}s (< 30s); {}", per.join(", ")),
    }
}

fn oracles() -> Outcome {
    let worst = oracle_check_worst(102, 50);
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Outcome {
        id: "2 oracles",
        pass: max < ORACLE_TOL,
        detail: format!("50 instances per objective, max rel diff {max:.2e} (< {ORACLE_TOL:e})"),
    }
}

fn group(m: &ModelReport, g: &str) -> f64 {
    m.groups.iter().find(|s| s.group == g).map(|s| s.summary.mean).unwrap_or(f64::NAN)
}

fn model<'a>(r: &'a ExperimentReport, name: &str) -> &'a ModelReport {
    r.model(name).unwrap_or_else(|| panic!("model {name} missing from report"))
}

fn benchmark(report: &ExperimentReport, secs: f64) -> Vec<Outcome> {
    let (stl, gomtl, amtfl) = (model(report, "stl"), model(report, "gomtl"), model(report, "amtfl"));
    let (se, sh) = (group(stl, "easy"), group(stl, "hard"));
    let (ae, ah) = (group(amtfl, "easy"), group(amtfl, "hard"));
    let gh = group(gomtl, "hard");
    let reductions = amtfl.reduction_vs_baseline.clone().unwrap_or_default();
    let min_red = reductions.iter().copied().fold(f64::INFINITY, f64::min);
    let in_time = secs < 600.0;
    vec![
        Outcome {
            id: "3a amtfl beats stl on both groups",
            pass: ae < se && ah < sh && in_time,
            detail: format!("easy {ae:.4} vs {se:.4}, hard {ah:.4} vs {sh:.4}; {secs:.1}s (< 600s)"),
        },
        Outcome {
            id: "3b gomtl worse than stl on hard tasks",
            pass: gh > sh && in_time,
            detail: format!("gomtl hard {gh:.4} vs stl hard {sh:.4}"),
        },
        Outcome {
            id: "3c no negative transfer under amtfl",
            pass: reductions.len() == 12 && min_red >= REDUCTION_FLOOR && in_time,
            detail: format!("min per-task reduction {min_red:.4} over {} tasks (>= {REDUCTION_FLOOR})", reductions.len()),
        },
    ]
}

fn asymmetry(report: &ExperimentReport) -> Outcome {
    let amtfl = model(report, "amtfl");
    let splits: Vec<f64> = amtfl.splits.iter().filter_map(|s| s.asymmetry_ratio).collect();
    let r = amtfl.asymmetry_ratio.as_ref().map(|s| s.mean).unwrap_or(f64::NAN);
    Outcome {
        id: "4 transfer asymmetry",
        pass: splits.len() == 5 && r < ASYMMETRY_BOUND,
        detail: format!(
            "r = {r:.3} over {} splits (< {ASYMMETRY_BOUND}; provisional < {PROVISIONAL_ASYMMETRY_BOUND} {})",
            splits.len(),
            if r < PROVISIONAL_ASYMMETRY_BOUND { "met" } else { "not met" }
        ),
    }
}

fn scalability() -> Outcome {
    let start = Instant::now();
    let cfg = CliConfig::load(&configs().join("scalability.json"), None).expect("scalability config");
    let sc = cfg.scalability.expect("scalability block");
    let rows = scalability_sweep(&sc).expect("scalability sweep");
    let secs = start.elapsed().as_secs_f64();
    let d = sc.synthetic.d;
    let counts_ok = amtl_parameter_count(30, 12) == 30 * 12 + 144
        && amtfl_parameter_count(30, 6, 12) == 180 + 144
        && rows.iter().all(|r| match r.model.as_str() {
            "amtl" => r.parameter_count == amtl_parameter_count(d, r.tasks),
            "amtfl" => r.parameter_count == amtfl_parameter_count(d, 6, r.tasks),
            _ => true,
        });
    let ratio = |t: usize| {
        let step = |m: &str| rows.iter().find(|r| r.tasks == t && r.model == m).map(|r| r.seconds_per_step);
        match (step("amtl"), step("amtfl")) {
            (Some(a), Some(b)) if b > 0.0 => a / b,
            _ => f64::NAN,
        }
    };
    let (lo, hi) = (ratio(12), ratio(120));
    Outcome {
        id: "5 scalability",
        pass: counts_ok && hi > lo && secs < 900.0,
        detail: format!(
            "parameter counts {}; time ratio amtl/amtfl {lo:.3} at T=12, {hi:.3} at T=120; {secs:.1}s (< 900s)",
            if counts_ok { "exact" } else { "WRONG" }
        ),
    }
}

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs() / b.abs().max(1.0));
    for _ in 0..20 {
        let data = rand_dataset(&mut rng, 6, 4, 9, LossKind::Squared);
        let cfg = LossConfig::squared().with_delta(0.3);
        let hp = Hyperparams { alpha: 0.0, gamma: 0.0, hidden_activation: Activation::Identity, ..rand_hp(&mut rng, 3) };
        let (l, s, a) = (rand_mat(&mut rng, 6, 3, 1.0), rand_mat(&mut rng, 3, 4, 1.0), rand_mat(&mut rng, 4, 3, 1.0));
        note(
            eval_amtfl(&AmtflParams { l: l.clone(), s: s.clone(), a }, &data, &cfg, &hp).unwrap(),
            eval_gomtl(&LatentFactorParams { l, s }, &data, &cfg, &hp).unwrap(),
        );

        let data = rand_dataset(&mut rng, 5, 3, 8, LossKind::Logistic);
        let cfg = LossConfig::logistic();
        let hp = Hyperparams { alpha: 0.0, gamma: 0.0, lambda: 0.0, ..rand_hp(&mut rng, 2) };
        let w = rand_mat(&mut rng, 5, 3, 1.0);
        let b = rand_transfer(&mut rng, 3, 1.0);
        note(
            eval_amtl(&InterTaskParams { w: w.clone(), b }, &data, &cfg, &hp).unwrap(),
            eval_stl(&w, &data, &cfg, 0.0).unwrap(),
        );

        for act in [Activation::Relu, Activation::Identity] {
            let data = rand_dataset(&mut rng, 5, 4, 7, LossKind::Squared);
            let cfg = LossConfig::squared().with_delta(0.5);
            let hp = Hyperparams { hidden_activation: act, ..rand_hp(&mut rng, 3) };
            let (l, s, a) = (rand_mat(&mut rng, 5, 3, 1.0), rand_mat(&mut rng, 3, 4, 1.0), rand_mat(&mut rng, 4, 3, 1.0));
            let shallow = eval_amtfl(&AmtflParams { l: l.clone(), s: s.clone(), a: a.clone() }, &data, &cfg, &hp).unwrap();
            let deep = DeepParams { layers: vec![l, s], biases: vec![Mat::zeros(1, 3)], a, recon_bias: None };
            note(eval_deep_amtfl(&deep, &data, &cfg, &hp).unwrap(), shallow);
        }
    }
    Outcome {
        id: "6 reduction identities",
        pass: worst < IDENTITY_TOL,
        detail: format!("max rel diff {worst:.2e} (< {IDENTITY_TOL:e})"),
    }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timings.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let (a, b) = (files(first), files(second));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    Outcome {
        id: "7 determinism",
        pass: !a.is_empty() && differing.is_empty(),
        detail: format!("{} non-timing files compared across 1- and 2-thread runs, {} differ {:?}", a.len(), differing.len(), differing.iter().take(3).collect::<Vec<_>>()),
    }
}

/// Ten Gaussian classes in 64 dimensions, 300 rows, PCA-feature sized.
fn write_mnist_like(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let centers = rand_mat(&mut rng, 10, 64, 1.0);
    let mut csv = String::new();
    for i in 0..300 {
        let c = i % 10;
        csv.push_str(&c.to_string());
        for j in 0..64 {
            csv.push_str(&format!(",{}", centers.get(c, j) + gauss(&mut rng, 1.0)));
        }
        csv.push('\n');
    }
    fs::write(dir.join("digits.csv"), csv).unwrap();
    let manifest = r#"{ "name": "mnist-like", "kind": "classification", "d": 64,
        "multiclass": { "file": "digits.csv", "classes": 10 } }"#;
    fs::write(dir.join("manifest.json"), manifest).unwrap();
    let sched = r#""schedule": { "base_lr": 0.01 }, "max_steps": 200"#;
    let config = format!(
        r#"{{ "out": "out", "experiment": {{ "name": "mnist-like", "n_splits": 5, "seed": 3, "standardize": true,
        "data": {{ "manifest": {{ "paths": ["manifest.json"], "split": {{ "counts": [100, 50, 50] }} }} }},
        "models": [
          {{ "name": "stl", "objective": "stl", "optimizer": {{ "kind": "adam" }}, {sched}, "grid": {{ "lambda": [0.001] }} }},
          {{ "name": "gomtl", "objective": "gomtl", "optimizer": {{ "kind": "adam" }}, {sched}, "grid": {{ "k": [8], "mu": [0.001] }} }},
          {{ "name": "mtnn", "objective": "mtnn", "optimizer": {{ "kind": "adam" }}, {sched}, "hidden": [32, 16], "grid": {{ "k": [16], "lambda": [0.0001] }} }},
          {{ "name": "deep_amtfl", "objective": "deep_amtfl", "optimizer": {{ "kind": "adam" }}, {sched}, "hidden": [32, 16],
             "grid": {{ "k": [16], "lambda": [0.0001], "mu": [0.0001], "alpha": [0.1], "gamma": [0.0001, 0.00001] }} }}
        ] }} }}"#
    );
    fs::write(dir.join("config.json"), config).unwrap();
}

fn manifest_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_mnist_like(dir.path());
    let config = dir.path().join("config.json");
    let code = run_cli(["amtfl", "run", "--config", config.to_str().unwrap()]);
    let out = dir.path().join("out");
    let report: Option<ExperimentReport> =
        fs::read_to_string(out.join("report.json")).ok().and_then(|t| serde_json::from_str(&t).ok());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap_or_default();
    let rows: Vec<&str> = summary.lines().filter(|l| l.contains(",all,")).collect();
    let ok = code == 0 && report.as_ref().is_some_and(|r| r.models.len() == 4 && !r.failed()) && rows.len() == 4;
    Outcome {
        id: "8 mnist-style manifest end to end",
        pass: ok,
        detail: format!("exit {code}; error-rate table: {}", rows.join(" | ")),
    }
}

fn main() {
    let mut outcomes = vec![gradients(), oracles()];
    line(&outcomes[0]);
    line(&outcomes[1]);

    let cfg = CliConfig::load(&configs().join("synthetic_benchmark.json"), None).expect("benchmark config");
    let exp = cfg.experiment.expect("experiment block");
    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let start = Instant::now();
    let first = pool(1).install(|| run_experiment(&exp)).expect("benchmark run");
    let secs = start.elapsed().as_secs_f64();
    write_outputs(&first, dirs.0.path()).unwrap();
    for o in benchmark(&first.report, secs).into_iter().chain([asymmetry(&first.report)]) {
        line(&o);
        outcomes.push(o);
    }

    let o = scalability();
    line(&o);
    outcomes.push(o);
    let o = identities();
    line(&o);
    outcomes.push(o);

    let second = pool(2).install(|| run_experiment(&exp)).expect("benchmark rerun");
    write_outputs(&second, dirs.1.path()).unwrap();
    let o = determinism(dirs.0.path(), dirs.1.path());
    line(&o);
    outcomes.push(o);

    let o = manifest_end_to_end();
    line(&o);
    outcomes.push(o);

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join("; "));
        std::process::exit(1);
    }
}
