use proptest::prelude::*;
use rand::Rng as _;

use freerea::benchio::{
    correlation_report, correlation_sample, exhaustive_best, kendall_tau, memory_path, spearman_rho, TabRecord, TabularBenchmark,
};
use freerea::evolve::ConstraintSpec;
use freerea::metrics::{evaluate, synthetic_batch, BatchSource};
use freerea::netbuilder::{MacroSkeleton, Stage};
use freerea::searchspace::{nats_from_index, Family};
use freerea::seed::{derive, rng_from};
use freerea::Error;

fn tiny() -> MacroSkeleton {
    MacroSkeleton {
        height: 8,
        width: 8,
        stages: vec![Stage { cells: 1, channels: 4 }, Stage { cells: 1, channels: 8 }],
        ..MacroSkeleton::default()
    }
}

#[test]
fn exhaustive_best_matches_a_filtered_scan() {
    let mut rng = rng_from(1);
    for trial in 0..50 {
        let mut bench = TabularBenchmark::new();
        let picks = rand::seq::index::sample(&mut rng, 15_625, 100);
        for i in picks {
            // Coarse accuracies force ties.
            let acc = rng.random_range(0..20) as f64 * 5.0;
            bench.insert(TabRecord {
                genotype: nats_from_index(i),
                test_accuracy: acc,
                flops: Some(rng.random_range(1..1000)),
                params: Some(rng.random_range(1..1000)),
            });
        }
        let c = ConstraintSpec::new(rng.random_range(1..1000), rng.random_range(1..1000));
        let mut feasible: Vec<&TabRecord> =
            bench.records().filter(|r| r.flops.unwrap() <= c.max_flops.unwrap() && r.params.unwrap() <= c.max_params.unwrap()).collect();
        feasible.sort_by(|a, b| b.test_accuracy.total_cmp(&a.test_accuracy).then(a.genotype.to_string().cmp(&b.genotype.to_string())));
        match (exhaustive_best(&bench, Some(&c)), feasible.first()) {
            (Ok(got), Some(want)) => assert_eq!(got, *want, "trial {trial}"),
            (Err(Error::NoFeasibleEntry), None) => {}
            (got, want) => panic!("trial {trial}: {got:?} vs {want:?}"),
        }
    }
}

#[test]
fn best_is_independent_of_row_order() {
    let rows: Vec<String> = (0..40).map(|i| format!("{},{}\n", nats_from_index(i * 97), (i * 7) % 13)).collect();
    let forward = format!("genotype,test_accuracy\n{}", rows.concat());
    let backward = format!("genotype,test_accuracy\n{}", rows.iter().rev().cloned().collect::<String>());
    let a = TabularBenchmark::from_reader(forward.as_bytes(), &memory_path()).unwrap();
    let b = TabularBenchmark::from_reader(backward.as_bytes(), &memory_path()).unwrap();
    assert_eq!(exhaustive_best(&a, None).unwrap(), exhaustive_best(&b, None).unwrap());
}

/// Table whose accuracy is a scaled copy of each architecture's LogSynflow,
/// computed with the same seeds the report uses.
fn log_synflow_table(seed: u64, sample: &[freerea::searchspace::Genotype], sk: &MacroSkeleton) -> TabularBenchmark {
    let batches = BatchSource::Fixed(synthetic_batch(sk, derive(seed, u64::MAX)));
    let ls: Vec<f64> = sample.iter().map(|g| evaluate(g, sk, 1, derive(seed, g.canonical_hash()), &batches).unwrap().mean.log_synflow).collect();
    let max = ls.iter().cloned().fold(0.0, f64::max);
    let mut bench = TabularBenchmark::new();
    for (g, v) in sample.iter().zip(&ls) {
        bench.insert(TabRecord { genotype: g.clone(), test_accuracy: 100.0 * v / max, flops: None, params: None });
    }
    bench
}

#[test]
fn report_self_correlation_and_damping() {
    let sk = tiny();
    let sample = correlation_sample(Family::Nats, Some(40), 3).unwrap();
    let bench = log_synflow_table(3, &sample, &sk);
    let rows = correlation_report(&sample, &sk, &bench, 1, 3).unwrap();
    let row = |name: &str| rows.iter().find(|r| r.metric == name).unwrap();
    assert!((row("log_synflow").kendall.unwrap() - 1.0).abs() < 1e-12);
    assert!((row("log_synflow").spearman.unwrap() - 1.0).abs() < 1e-12);
    // Raw Synflow is not a monotone function of its damped variant.
    assert!(row("synflow").kendall.unwrap() < row("log_synflow").kendall.unwrap());
}

#[test]
fn report_flags_constant_accuracy_and_missing_entries() {
    let sk = tiny();
    let sample = correlation_sample(Family::Nats, Some(10), 4).unwrap();
    let mut bench = TabularBenchmark::new();
    for g in &sample {
        bench.insert(TabRecord { genotype: g.clone(), test_accuracy: 50.0, flops: None, params: None });
    }
    let rows = correlation_report(&sample, &sk, &bench, 1, 4).unwrap();
    assert!(rows.iter().all(|r| r.kendall.is_none() && r.status.contains("degenerate")));

    let absent = (0..15_625).map(nats_from_index).find(|g| bench.get(g).is_none()).unwrap();
    let mut wider = sample.clone();
    wider.push(absent);
    assert!(matches!(correlation_report(&wider, &sk, &bench, 1, 4), Err(Error::MissingGenotype(m)) if m.len() == 1));
}

proptest! {
    #[test]
    fn correlations_are_bounded_and_rank_invariant(
        pairs in prop::collection::vec((-50i32..50, -50i32..50), 2..60),
        shift in -10.0..10.0f64,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        // Strictly increasing transform of x.
        let tx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() + shift).collect();
        if let (Ok(t), Ok(r)) = (kendall_tau(&x, &y), spearman_rho(&x, &y)) {
            prop_assert!((-1.0..=1.0).contains(&t) && (-1.0..=1.0).contains(&r));
            prop_assert!((kendall_tau(&tx, &y).unwrap() - t).abs() < 1e-12);
            prop_assert!((spearman_rho(&tx, &y).unwrap() - r).abs() < 1e-12);
            prop_assert!((kendall_tau(&y, &x).unwrap() - t).abs() < 1e-12);
        }
    }
}
