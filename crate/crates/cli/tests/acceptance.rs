//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use rand::Rng;
use rand_distr::StandardNormal;
use senscov::baselines::{baseline_campaign, BaselineConfig, BaselineState, Metric};
use senscov::coverage::{coverage, mcse, sample_neurons, CoverageReport, NeuronStats};
use senscov::data::load_mnist_split;
use senscov::engine::{accuracy, sgd_train, TrainConfig};
use senscov::experiments::{
    correlate_experiment, fault_corpus, retrain_experiment, sample_size_study, CorrelateConfig, RetrainConfig,
};
use senscov::fuzzer::{maximize, objective, AscentParams};
use senscov::perturb::perturb;
use senscov::sensitivity::{process_batch, BatchItem, FaultLog};
use senscov::stats::median;
use senscov::{
    rng, run_campaign, CoverageConfig, Dataset, Family, FuzzConfig, Model, PerturbSpec, SensitivityStore, Split, Tensor,
};

type Outcome = (bool, String);

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

struct Mnist {
    train: Dataset,
    test: Dataset,
}

fn mnist() -> Mnist {
    Mnist {
        train: load_mnist_split(data_dir(), Split::Train).unwrap().slice(0, 2000),
        test: load_mnist_split(data_dir(), Split::Test).unwrap(),
    }
}

fn reference_mlp(train: &Dataset) -> Model {
    let init = Model::mlp(vec![1, 28, 28], &[784, 64, 10], 1).unwrap();
    sgd_train(
        &init,
        train,
        &TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 1,
        },
    )
    .unwrap()
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for kind in ALL_KINDS {
        let mut r = rng::stream(101, &[kind as u64]);
        let mut done = 0;
        while done < 20 {
            let m = model_for(kind, &mut r);
            let x = uniform_tensor(&mut r, m.input_shape(), 0.0, 1.0);
            if !kink_free(&m, &x) {
                continue;
            }
            let coeffs = normal_tensor(&mut r, &[m.num_neurons()], 1.0).into_data();
            let y = done % m.num_classes();
            worst = worst
                .max(input_gradient_error(&m, &x, &coeffs))
                .max(param_gradient_error(&m, &[x], &[y]));
            done += 1;
        }
        count += done;
    }
    let mut r = rng::stream(102, &[]);
    let mut objective_checks = 0;
    while objective_checks < 100 {
        let kind = ALL_KINDS[objective_checks % ALL_KINDS.len()];
        let m = model_for(kind, &mut r);
        let clean = uniform_tensor(&mut r, m.input_shape(), 0.0, 1.0);
        let mut cand = clean.clone();
        for v in cand.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
        let k = r.random_range(1..=m.num_neurons());
        let neurons: Vec<usize> = (0..k).map(|_| r.random_range(0..m.num_neurons())).collect();
        if let Some(e) = objective_gradient_error(&m, &clean, &cand, &neurons) {
            worst = worst.max(e);
            objective_checks += 1;
        }
    }
    (
        worst < 1e-4,
        format!("{count} layer instances + {objective_checks} objective instances, max rel err {worst:.2e}"),
    )
}

fn mcse_oracle() -> Outcome {
    let constant = mcse(&vec![0.37; 10_000]).unwrap();
    let mut within = 0;
    for seed in 0..50u64 {
        let mut r = rng::stream(200, &[seed]);
        let chain: Vec<f64> = (0..10_000).map(|_| r.sample(StandardNormal)).collect();
        let m = mcse(&chain).unwrap();
        if (0.01 / 1.5..=0.01 * 1.5).contains(&m) {
            within += 1;
        }
    }
    (
        constant == 0.0 && within >= 45,
        format!("constant chain mcse {constant}, {within}/50 normal chains within x/÷1.5 of 0.01"),
    )
}

fn coverage_semantics() -> Outcome {
    let stats: Vec<NeuronStats> = (0..12)
        .map(|i| NeuronStats {
            neuron_id: i,
            sample_count: 100,
            variance: 1.0,
            posterior_mean_mu: Some(1.0),
            posterior_sd_mu: Some(0.1),
            mcse: Some(if i % 2 == 0 { 0.01 } else { 0.2 }),
            converged: i % 2 == 0,
        })
        .collect();
    let fig = CoverageReport::from_stats(0, 0.05, stats).coverage;

    let neurons = 200;
    let mut store = SensitivityStore::new(neurons);
    let mut r = rng::stream(300, &[]);
    for _ in 0..5000 {
        let row: Vec<f64> = (0..neurons)
            .map(|_| (1.0 + 0.1 * r.sample::<f64, _>(StandardNormal)).max(0.0))
            .collect();
        store.push(&row).unwrap();
    }
    let report = coverage(&store, &CoverageConfig::default(), 7, 0, None).unwrap();
    (
        fig == 0.5 && report.coverage == 1.0,
        format!(
            "6 of 12 converged gives {fig}; synthetic store coverage {} over {} neurons",
            report.coverage,
            report.stats.len()
        ),
    )
}

fn sampler() -> Outcome {
    let worked = sample_neurons(&[5.0, 1.0, 9.0, 3.0], 2).unwrap();
    let mut r = rng::stream(400, &[]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=10_000);
        let k = r.random_range(1..=2000);
        let ties = r.random_bool(0.3);
        let vars: Vec<f64> = (0..n)
            .map(|_| {
                if ties {
                    r.random_range(0..5) as f64
                } else {
                    r.random_range(0.0..10.0)
                }
            })
            .collect();
        if sample_neurons(&vars, k).unwrap() != brute_force_sampler(&vars, k) {
            mismatches += 1;
        }
    }
    (
        worked == vec![3, 2] && mismatches == 0,
        format!("worked example {worked:?}, {mismatches}/1000 mismatches against the full-sort oracle"),
    )
}

fn budgets() -> Outcome {
    let cases = 10_000u64;
    let mut bad = 0;
    for c in 0..cases {
        let mut r = rng::stream(500, &[c]);
        let m = Model::mlp(vec![6], &[6, 5, 3], c % 11).unwrap();
        let x = uniform_tensor(&mut r, &[6], 0.0, 1.0);
        let y = (c % 3) as usize;
        let in_box = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));

        if perturb(&PerturbSpec::gaussian(0.0), &m, &x, y, &mut r).unwrap() != x
            || perturb(&PerturbSpec::fgsm(0.0), &m, &x, y, &mut r).unwrap() != x
        {
            bad += 1;
        }
        let eps = r.random_range(0.0..=0.5);
        let p = perturb(&PerturbSpec::pgd(eps), &m, &x, y, &mut r).unwrap();
        if p.linf_distance(&x) > eps + 1e-12 || !in_box(&p) {
            bad += 1;
        }
        let budget = r.random_range(0.0..=0.5);
        let mut seed = x.clone();
        for v in seed.data_mut() {
            *v = (*v + r.random_range(-0.6..0.6)).clamp(0.0, 1.0);
        }
        let neurons: Vec<usize> = (0..m.num_neurons()).collect();
        let params = AscentParams {
            steps: r.random_range(0..5),
            step_size: 0.05,
            budget,
        };
        let (a, v) = maximize(&m, &x, &seed, &neurons, &params, &mut r).unwrap();
        if a.linf_distance(&x) > budget + 1e-12
            || !in_box(&a)
            || (v - objective(&m, &x, &a, &neurons).unwrap()).abs() > 1e-9 * (1.0 + v.abs())
        {
            bad += 1;
        }
    }
    (
        bad == 0,
        format!("{cases} cases each for identity, pgd and ascent, {bad} violations"),
    )
}

fn correlation(d: &Mnist, model: &Model) -> Outcome {
    let mut rs = Vec::new();
    for seed in 0..3 {
        let mut cfg = CorrelateConfig::new(Family::Gaussian, seed);
        cfg.campaign.batch_size = d.test.len();
        rs.push(correlate_experiment(model, &d.test, &cfg).unwrap().pearson);
    }
    let med = median(&rs).unwrap();
    (med >= 0.7, format!("pearson per seed {rs:.3?}, median {med:.3}"))
}

fn superiority(d: &Mnist, model: &Model) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let mut cfg = FuzzConfig::for_family(Family::Gaussian, seed);
        cfg.batch_size = d.test.len();
        let ours = run_campaign(model, &d.test, &cfg, |_| Ok(())).unwrap().fault_count();
        let mut state = BaselineState::for_model(model, &Metric::nc(), None).unwrap();
        let nc = baseline_campaign(
            model,
            &d.test,
            &mut state,
            &BaselineConfig::new(Metric::nc(), Family::Gaussian, seed),
        )
        .unwrap()
        .fault_count();
        ok &= ours > nc;
        detail.push(format!(
            "seed {seed}: {ours} vs {nc} (nc coverage {:.3})",
            state.coverage()
        ));
    }
    (ok, detail.join("; "))
}

fn retraining(d: &Mnist, model: &Model) -> Outcome {
    let fuzz_set = d.test.slice(0, 1000);
    let heldout = d.test.slice(1000, 1000);
    let mut gains = Vec::new();
    let mut worst_drop = f64::NEG_INFINITY;
    for seed in 0..3 {
        let mut cfg = FuzzConfig::for_spec(PerturbSpec::fgsm(0.1), seed);
        cfg.batch_size = fuzz_set.len();
        let campaign = run_campaign(model, &fuzz_set, &cfg, |_| Ok(())).unwrap();
        let (xs, ys) = fault_corpus(&campaign);
        let rc = RetrainConfig {
            train: TrainConfig {
                epochs: 3,
                learning_rate: 0.02,
                batch_size: 32,
                seed,
            },
            eval_spec: PerturbSpec::fgsm(0.1),
        };
        let (_, rep) = retrain_experiment(model, &d.train, &heldout, &xs, &ys, &rc).unwrap();
        gains.push(rep.gain());
        worst_drop = worst_drop.max(rep.clean_accuracy_before - rep.clean_accuracy_after);
    }
    let med = median(&gains).unwrap();
    (
        med > 0.0 && worst_drop <= 0.01,
        format!("perturbed accuracy gains {gains:.4?} (median {med:.4}), worst clean drop {worst_drop:.4}"),
    )
}

fn sample_size(d: &Mnist) -> Outcome {
    let init = Model::lenet1(1).unwrap();
    let model = sgd_train(
        &init,
        &d.train,
        &TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 1,
        },
    )
    .unwrap();
    let sizes = [100, 500, 1000, 2000];
    let cfg = CoverageConfig {
        threshold: 1e-4,
        ..CoverageConfig::default()
    };
    let spec = PerturbSpec::gaussian(0.05);
    let n = 200;
    let mut errors = vec![Vec::new(); sizes.len()];
    for seed in 0..41u64 {
        let pert: Vec<Tensor> = (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, &[rng::TAG_NOISE, i as u64]);
                perturb(&spec, &model, &d.test.inputs[i], d.test.labels[i], &mut r).unwrap()
            })
            .collect();
        let items: Vec<BatchItem> = (0..n)
            .map(|i| BatchItem {
                input_id: i,
                label: d.test.labels[i],
                clean: &d.test.inputs[i],
                clean_trace: None,
                perturbed: &pert[i],
                spec,
            })
            .collect();
        let mut store = SensitivityStore::new(model.num_neurons());
        process_batch(&model, &items, 0, &mut store, &mut FaultLog::new()).unwrap();
        let study = sample_size_study(&store, &sizes, &cfg, seed).unwrap();
        for (e, row) in errors.iter_mut().zip(&study.rows) {
            e.push((row.coverage - study.ground_truth).abs());
        }
    }
    let med: Vec<f64> = errors.iter().map(|e| median(e).unwrap()).collect();
    let monotone = med.windows(2).all(|w| w[1] <= w[0]);
    (
        monotone && med[2] <= 0.05,
        format!(
            "{} neurons, median |coverage - ground truth| at k={sizes:?}: {med:.4?}",
            model.num_neurons()
        ),
    )
}

fn run_cli(dir: &Path, workers: usize, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_senscov"))
        .current_dir(dir)
        .env("SENSCOV_WORKERS", workers.to_string())
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(dir: &Path, workers: usize) -> BTreeMap<String, Vec<u8>> {
    let dd = data_dir();
    let dd = dd.to_str().unwrap();
    let steps: [&[&str]; 7] = [
        &[
            "train",
            "--data-dir",
            dd,
            "--range",
            "0..400",
            "--epochs",
            "2",
            "--seed",
            "4",
            "--out",
            "m.thm",
        ],
        &[
            "fuzz",
            "--model",
            "m.thm",
            "--data-dir",
            dd,
            "--range",
            "0..200",
            "--family",
            "fgsm",
            "--batch-size",
            "200",
            "--max-iterations",
            "3",
            "--threshold",
            "1e-5",
            "--sample-size",
            "40",
            "--seed",
            "4",
            "--out",
            "fuzz.json",
        ],
        &[
            "baseline",
            "--model",
            "m.thm",
            "--data-dir",
            dd,
            "--range",
            "0..200",
            "--metric",
            "nc",
            "--max-attempts",
            "400",
            "--seed",
            "4",
            "--out",
            "nc.json",
        ],
        &[
            "baseline",
            "--model",
            "m.thm",
            "--data-dir",
            dd,
            "--range",
            "0..200",
            "--metric",
            "kmnc",
            "--sections",
            "50",
            "--profile-range",
            "0..400",
            "--max-attempts",
            "400",
            "--seed",
            "4",
            "--out",
            "kmnc.json",
        ],
        &[
            "correlate",
            "--model",
            "m.thm",
            "--data-dir",
            dd,
            "--range",
            "0..200",
            "--batch-size",
            "200",
            "--max-iterations",
            "2",
            "--error-replicates",
            "2",
            "--seed",
            "4",
            "--out",
            "corr.json",
        ],
        &[
            "retrain",
            "--model",
            "m.thm",
            "--campaign",
            "fuzz.json",
            "--data-dir",
            dd,
            "--train-range",
            "0..400",
            "--heldout-range",
            "0..200",
            "--epochs",
            "1",
            "--seed",
            "4",
            "--out",
            "tuned.thm",
        ],
        &[
            "report",
            "--campaign",
            "fuzz.json",
            "--table",
            "faults",
            "--out",
            "faults.csv",
        ],
    ];
    for s in steps {
        run_cli(dir, workers, s);
    }
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pipeline(dirs[0].path(), 1);
    let b = pipeline(dirs[1].path(), 4);
    let c = pipeline(dirs[2].path(), 4);
    let differing: Vec<&String> = a
        .keys()
        .filter(|k| a.get(*k) != b.get(*k) || a.get(*k) != c.get(*k))
        .collect();
    (
        a.len() == b.len() && a.len() == c.len() && differing.is_empty(),
        format!(
            "{} output files compared across 1/4/4 workers, differing: {differing:?}",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    // the test runner passes harness flags such as --list; only run for a plain invocation
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let d = mnist();
    let model = reference_mlp(&d.train);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("mcse oracle", Box::new(mcse_oracle)),
        ("coverage semantics", Box::new(coverage_semantics)),
        ("sampler equivalence", Box::new(sampler)),
        ("perturbation budgets", Box::new(budgets)),
        ("end-to-end correlation", Box::new(|| correlation(&d, &model))),
        ("fault-count superiority over nc", Box::new(|| superiority(&d, &model))),
        ("retraining gain", Box::new(|| retraining(&d, &model))),
        ("sample-size study", Box::new(|| sample_size(&d))),
        ("cli determinism", Box::new(determinism)),
    ];
    println!("reference mlp test accuracy {:.4}", accuracy(&model, &d.test).unwrap());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(o) => o,
            Err(e) => (
                false,
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default(),
            ),
        };
        failed += usize::from(!ok);
        println!(
            "{} criterion {}: {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
