//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The end-to-end drift runs take several minutes.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::{layer_cases, mini_arch, random};
use fedprint::config::{ExperimentConfig, Profile};
use fedprint::dataset::{partition_clients, Example};
use fedprint::eval::EvalResult;
use fedprint::fed::{self, local_train, FedConfig, STAGE_TRAIN};
use fedprint::metric::{triplet_loss, triplet_loss_backward, Triplet};
use fedprint::models::{build_baseline, build_proposed, DenseNetConfig, Model};
use fedprint::nn::gradcheck::{grad_check, GradCheckConfig};
use fedprint::nn::{Layer, Tensor};
use fedprint::pipeline::{self, Prepared};
use fedprint::seed;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for (label, kind, shapes) in layer_cases() {
        for shape in &shapes {
            for s in 0..5 {
                let mut layer = Layer::<f64>::new(label, kind.clone(), &mut seed::rng(s, "init", &[]));
                let cfg = GradCheckConfig { seed: s, ..Default::default() };
                let report = grad_check(&mut layer, &random(shape, s), &cfg).map_err(|e| e.to_string())?;
                if !report.passed() {
                    return Err(format!("{label} {shape:?} seed {s}\n{report}"));
                }
                checked += 1;
            }
        }
    }
    for s in 0..5 {
        let mut model = Model::<f64>::build(&mini_arch(), s).map_err(|e| e.to_string())?;
        let cfg = GradCheckConfig { seed: s, ..Default::default() };
        let report = grad_check(&mut model, &random(&[2, 1, 3, 32], s + 10), &cfg).map_err(|e| e.to_string())?;
        if !report.passed() {
            return Err(format!("miniature network seed {s}\n{report}"));
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 60.0,
        format!("{checked} checks at rel <= 1e-4 in {secs:.1}s"),
        format!("checks passed but took {secs:.1}s"),
    )
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::profile(Profile::Desk);
    cfg.windows_per_condition = 200;
    cfg.window = 32;
    cfg.stride = 32;
    cfg.hybrid_segment = 128;
    cfg.densenet = DenseNetConfig {
        blocks: 2,
        layers_per_block: 2,
        ..DenseNetConfig::default()
    };
    cfg
}

fn fedavg_single_client() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let run = || -> fedprint::Result<(String, String)> {
        let prep = pipeline::prepare(&cfg, &pipeline::synthesize(&cfg)?)?;
        let clients = partition_clients(prep.train.clone(), 1, 0)?;
        let fc = FedConfig {
            rounds: 3,
            fraction: 1.0,
            local_epochs: 1,
            seed: 5,
            ..FedConfig::default()
        };
        let init = pipeline::init_params::<f64>(&cfg)?;
        let (fed_w, _) = fed::train(init.clone(), &clients, &fc, STAGE_TRAIN, None)?;
        let mut w = init;
        for round in 0..fc.rounds {
            w = local_train(&w, &clients[0], &fc, STAGE_TRAIN, round)?.params;
        }
        Ok((fed_w.checksum(), w.checksum()))
    };
    let (a, b) = run().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        a == b && secs < 120.0,
        format!("checksums equal ({}...) in {secs:.1}s", &a[..12]),
        format!("federated {a} vs sequential {b} in {secs:.1}s"),
    )
}

fn budgets() -> Outcome {
    let count = |kind: &str| build_baseline::<f64>(kind, 0).map(|p| p.param_count());
    let proposed = build_proposed::<f64>(&DenseNetConfig::default(), 0)
        .map_err(|e| e.to_string())?
        .param_count();
    let mlp = count("mlp").map_err(|e| e.to_string())?;
    let resnet = count("resnet").map_err(|e| e.to_string())?;
    let ok = (60_000..=100_000).contains(&proposed)
        && mlp == 1_575_428
        && (resnet as f64 - 157_540.0).abs() <= 0.25 * 157_540.0
        && proposed < resnet;
    let line = format!("proposed {proposed}, mlp {mlp}, resnet {resnet}");
    check(ok, line.clone(), line)
}

/// Rotation built from Givens rotations over every coordinate plane.
fn rotate(emb: &Tensor, seed_: u64) -> Tensor {
    let d = emb.dim(1);
    let mut r = seed::rng(seed_, "rotation", &[]);
    let mut out = emb.clone();
    for i in 0..d {
        for j in i + 1..d {
            let t: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let (c, s) = (t.cos(), t.sin());
            for n in 0..emb.dim(0) {
                let row = &mut out.data_mut()[n * d..(n + 1) * d];
                let (u, v) = (row[i], row[j]);
                row[i] = c * u - s * v;
                row[j] = s * u + c * v;
            }
        }
    }
    out
}

fn triplets() -> Outcome {
    let ts = [
        Triplet { anchor: 0, positive: 1, negative: 2 },
        Triplet { anchor: 3, positive: 4, negative: 5 },
        Triplet { anchor: 5, positive: 3, negative: 1 },
        Triplet { anchor: 2, positive: 0, negative: 4 },
    ];
    let (mut worst_fd, mut worst_rot) = (0.0f64, 0.0f64);
    for s in 0..20 {
        let mut r = seed::rng(s, "triplet-suite", &[]);
        let emb = Tensor::from_fn(&[6, 4], |_| r.random_range(-1.0..1.0));
        let margin = r.random_range(0.1..2.0);
        let loss = triplet_loss(&emb, &ts, margin).map_err(|e| e.to_string())?;
        if loss < 0.0 {
            return Err(format!("negative loss {loss}"));
        }
        worst_rot = worst_rot.max((triplet_loss(&rotate(&emb, s), &ts, margin).unwrap() - loss).abs());
        let g = triplet_loss_backward(&emb, &ts, margin).unwrap();
        let h = 1e-6;
        for i in 0..emb.len() {
            let (mut up, mut down) = (emb.clone(), emb.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            let fd = (triplet_loss(&up, &ts, margin).unwrap() - triplet_loss(&down, &ts, margin).unwrap()) / (2.0 * h);
            worst_fd = worst_fd.max((fd - g.data()[i]).abs());
        }
        // a far negative satisfies the margin
        let sep = Tensor::from_fn(&[3, 4], |i| if i >= 8 { 50.0 } else { 0.01 * i as f64 });
        let zero = triplet_loss(&sep, &[Triplet { anchor: 0, positive: 1, negative: 2 }], margin).unwrap();
        if zero != 0.0 {
            return Err(format!("satisfied margin gave loss {zero}"));
        }
    }
    check(
        worst_fd <= 1e-6 && worst_rot <= 1e-9,
        format!("fd error {worst_fd:.1e}, rotation drift {worst_rot:.1e}"),
        format!("fd error {worst_fd:.1e}, rotation drift {worst_rot:.1e}"),
    )
}

/// Identity overlap between the scored target examples and everything the
/// model or its centroids saw, computed independently of the pipeline.
fn leak_count(prep: &Prepared, max_rho: usize) -> usize {
    let key = |e: &Example| e.id.to_string();
    let seen: HashSet<String> = prep.train.iter().chain(&prep.target[..max_rho]).map(key).collect();
    prep.target[max_rho..].iter().filter(|e| seen.contains(&key(e))).count()
}

struct DriftRun {
    seed: u64,
    results: Vec<EvalResult>,
    leaks: usize,
}

impl DriftRun {
    fn accuracy(&self, setting: &str, rho: usize) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.meta.setting == setting && r.meta.rho == rho)
            .map(|r| r.accuracy)
    }
}

fn drift_run(cfg: &ExperimentConfig) -> fedprint::Result<DriftRun> {
    let streams = pipeline::synthesize(cfg)?;
    let prep = pipeline::prepare(cfg, &streams)?;
    let (w, _) = pipeline::train_global::<f32>(cfg, &prep)?;
    let results = pipeline::adapt_and_evaluate(cfg, &w, &prep)?;
    let max_rho = pipeline::usable_rhos(cfg, prep.target.len()).into_iter().max().unwrap_or(0);
    Ok(DriftRun {
        seed: cfg.seed,
        leaks: leak_count(&prep, max_rho),
        results,
    })
}

/// Sub-criteria (a) to (d) for one seed.
fn drift_checks(run: &DriftRun) -> [bool; 4] {
    let a = |s: &str, r: usize| run.accuracy(s, r).unwrap_or(f64::NAN);
    let same = a("same-day", 0);
    let zero = a("zero-shot", 0);
    let sweep: Vec<f64> = [50, 100, 200, 400].iter().map(|&r| a("adapted", r)).collect();
    let drops: Vec<f64> = sweep.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    [
        same >= 0.85,
        zero <= same - 0.10,
        a("adapted", 200) >= zero + 0.05,
        sweep.iter().all(|v| v.is_finite()) && (drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.02)),
    ]
}

fn drift(runs: &[DriftRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut held = 0;
    for run in runs {
        let c = drift_checks(run);
        let a = |s: &str, r: usize| run.accuracy(s, r).unwrap_or(f64::NAN);
        lines.push(format!(
            "seed {}: same-day {:.3}, zero-shot {:.3}, adapted 50/100/200/400 {:.3}/{:.3}/{:.3}/{:.3}, a-d {:?}",
            run.seed,
            a("same-day", 0),
            a("zero-shot", 0),
            a("adapted", 50),
            a("adapted", 100),
            a("adapted", 200),
            a("adapted", 400),
            c
        ));
        held += usize::from(c.iter().all(|&x| x));
    }
    let body = format!("{held}/{} seeds hold\n    {}", runs.len(), lines.join("\n    "));
    check(held >= 2, body.clone(), body)
}

fn resnet_adaptation(cfg: &ExperimentConfig) -> (Outcome, Option<usize>) {
    let mut cfg = cfg.clone();
    cfg.model = "resnet".into();
    cfg.rhos = vec![0, 200];
    match drift_run(&cfg) {
        Err(e) => (Err(e.to_string()), None),
        Ok(run) => {
            let zero = run.accuracy("zero-shot", 0).unwrap_or(f64::NAN);
            let adapted = run.accuracy("adapted", 200).unwrap_or(f64::NAN);
            let line = format!("zero-shot {zero:.3}, adapted rho=200 {adapted:.3}, gain {:+.3}", adapted - zero);
            (check(adapted > zero, line.clone(), line), Some(run.leaks))
        }
    }
}

fn pipeline_once(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.conf");
    let (data, train, eval) = (root.join("data"), root.join("train"), root.join("eval"));
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let steps: [Vec<String>; 3] = [
        vec!["generate".into(), "--out".into(), p(&data)],
        vec!["train".into(), "--data".into(), p(&data), "--out".into(), p(&train)],
        vec![
            "adapt-eval".into(),
            "--data".into(),
            p(&data),
            "--checkpoint".into(),
            p(&train.join("model.ckpt")),
            "--out".into(),
            p(&eval),
        ],
    ];
    for step in steps {
        let mut argv = vec!["fedprint".to_string(), "--config".into(), p(&conf)];
        argv.extend(step);
        let code = fedprint::cli::run(&argv);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", argv[3..].join(" ")));
        }
    }
    let mut files = Vec::new();
    for (dir, name) in [
        (&train, "model.ckpt"),
        (&train, "rounds.csv"),
        (&eval, "results.jsonl"),
        (&eval, "summary.csv"),
    ] {
        let bytes = fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        files.push((name.to_string(), bytes));
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = pipeline_once(a.path())?;
    let fb = pipeline_once(b.path())?;
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        differing.is_empty(),
        format!("{} output files byte-identical across two runs", fa.len()),
        format!("differing files: {differing:?}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, body) = match outcome {
            Ok(b) => ("PASS", b),
            Err(b) => {
                failed += 1;
                ("FAIL", b)
            }
        };
        println!("{tag} criterion {n} ({name}): {body}");
    };

    report(1, "gradient checks", gradients());
    report(2, "single-client federation equals sequential training", fedavg_single_client());
    report(3, "parameter budgets", budgets());
    report(4, "triplet loss suite", triplets());

    let start = Instant::now();
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for s in 0..3 {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.seed = s;
        eprintln!("drift experiment, seed {s}...");
        match drift_run(&cfg) {
            Ok(r) => runs.push(r),
            Err(e) => errors.push(format!("seed {s}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let drift_outcome = if !errors.is_empty() {
        Err(errors.join("; "))
    } else if secs > 900.0 {
        let body = drift(&runs).unwrap_or_else(|b| b);
        Err(format!("{body}\n    {secs:.0}s exceeds the 15 min budget"))
    } else {
        drift(&runs).map(|b| format!("{b}\n    {secs:.0}s"))
    };
    report(5, "day-2 drift and adaptation", drift_outcome);

    eprintln!("resnet adaptation...");
    let (resnet, resnet_leaks) = resnet_adaptation(&ExperimentConfig::profile(Profile::Desk));
    report(6, "adaptation helps the resnet baseline", resnet);
    report(7, "byte-identical reruns", determinism());

    let mut leaks: Vec<usize> = runs.iter().map(|r| r.leaks).collect();
    leaks.extend(resnet_leaks);
    report(
        8,
        "leak check",
        check(
            errors.is_empty() && leaks.iter().all(|&l| l == 0),
            format!("{} runs, zero shared identities", leaks.len()),
            format!("overlaps per run {leaks:?}, errors {errors:?}"),
        ),
    );

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
