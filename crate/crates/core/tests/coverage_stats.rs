use rand::Rng;
use rand_distr::{Distribution, Normal};
use senscov::coverage::{coverage, fit_posterior, mcse_pooled, sample_neurons, McmcConfig};
use senscov::rng;
use senscov::stats::median;
use senscov::{CoverageConfig, SensitivityStore};

fn normal_samples(seed: u64, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[]);
    let d = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| d.sample(&mut r)).collect()
}

fn fit_mcse(samples: &[f64], seed: u64) -> f64 {
    let post = fit_posterior(samples, &McmcConfig::default(), seed).unwrap();
    mcse_pooled(&post.mu).unwrap()
}

#[test]
fn posterior_mean_recovers_normal_mean() {
    let xs = normal_samples(1, 5000, 2.0, 1.0);
    let post = fit_posterior(&xs, &McmcConfig::default(), 9).unwrap();
    let m = post.mu_mean();
    assert!((1.9..=2.1).contains(&m), "{m}");
    // conjugate check: flat-prior posterior sd of mu is about s / sqrt(n)
    assert!((post.mu_sd() - 1.0 / 5000f64.sqrt()).abs() < 0.01);
    let same = fit_posterior(&xs, &McmcConfig::default(), 9).unwrap();
    assert_eq!(post, same);
}

#[test]
fn constant_samples_pin_the_mean() {
    for c in [0.0, 0.3, 7.5] {
        let post = fit_posterior(&vec![c; 200], &McmcConfig::default(), 2).unwrap();
        assert!((post.mu_mean() - c).abs() <= 0.1 * (1.0 + c));
    }
    assert!(fit_posterior(&[1.0], &McmcConfig::default(), 0).is_err());
}

#[test]
fn larger_variance_converges_slower() {
    let mut wins = 0;
    for t in 0..50u64 {
        let a = normal_samples(100 + t, 200, 0.0, 1.0);
        let b = normal_samples(200 + t, 200, 0.0, 5.0);
        if fit_mcse(&a, t) <= fit_mcse(&b, t) {
            wins += 1;
        }
    }
    assert!(wins >= 45, "{wins}/50");
}

#[test]
fn more_samples_tighten_mcse() {
    let medians: Vec<f64> = [100, 1000, 10_000]
        .iter()
        .map(|&n| {
            let v: Vec<f64> = (0..15u64)
                .map(|s| fit_mcse(&normal_samples(s, n, 1.0, 1.0), s))
                .collect();
            median(&v).unwrap()
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn report_is_consistent() {
    let n = 40;
    let mut store = SensitivityStore::new(n);
    let mut r = rng::stream(5, &[]);
    for i in 0..60 {
        let row: Vec<f64> = (0..n)
            .map(|j| {
                if i < 31 || j % 2 == 0 {
                    (j as f64 * 0.1) * r.random::<f64>()
                } else {
                    0.0
                }
            })
            .collect();
        store.push(&row).unwrap();
    }
    for k in [1, 7, 40, 100] {
        let cfg = CoverageConfig {
            sample_size: k,
            threshold: 0.001,
            ..CoverageConfig::default()
        };
        let rep = coverage(&store, &cfg, 3, 0, None).unwrap();
        assert_eq!(rep.sampled_neuron_ids, sample_neurons(&store.variances(), k).unwrap());
        assert_eq!(rep.stats.len(), k.min(n));
        assert_eq!(rep.coverage, rep.converged_count() as f64 / rep.stats.len() as f64);
        assert!(rep
            .stats
            .iter()
            .all(|s| s.converged == s.mcse.is_some_and(|m| m <= 0.001)));
        assert!(rep.stats.iter().all(|s| s.variance >= 0.0 && s.mcse.unwrap() >= 0.0));
    }
}

#[test]
fn coverage_does_not_depend_on_worker_count() {
    let mut store = SensitivityStore::new(30);
    for i in 0..50 {
        let row: Vec<f64> = (0..30)
            .map(|j| ((i * 7 + j * 13) % 11) as f64 * 0.01 * (j as f64))
            .collect();
        store.push(&row).unwrap();
    }
    let cfg = CoverageConfig {
        threshold: 0.0005,
        ..CoverageConfig::default()
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| coverage(&store, &cfg, 1, 2, None).unwrap());
    let b = four.install(|| coverage(&store, &cfg, 1, 2, None).unwrap());
    assert_eq!(a, b);
}
