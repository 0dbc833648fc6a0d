use std::collections::HashSet;
use std::time::Duration;

use freerea::evolve::{run_search, Algorithm, FnObjective, Individual, Search, SearchConfig, VirtualClock, WallClock};
use freerea::searchspace::{Genotype, Op};
use freerea::seed::derive;

fn landscape() -> FnObjective<impl Fn(&Genotype) -> f64 + Sync> {
    // Rugged but deterministic: rewards conv3x3 and penalizes adjacent skips.
    FnObjective(|g: &Genotype| {
        let Genotype::Nats(ops) = g else { return 0.0 };
        let convs = ops.iter().filter(|&&o| o == Op::Conv3x3).count() as f64;
        let skips = ops.windows(2).filter(|w| w[0] == Op::Skip && w[1] == Op::Skip).count() as f64;
        convs - 0.7 * skips + 0.1 * (ops[0] == Op::AvgPool3x3) as u8 as f64
    })
}

fn ops(g: &Genotype) -> [Op; 6] {
    match g {
        Genotype::Nats(o) => *o,
        _ => unreachable!(),
    }
}

fn edit_distance(a: &Genotype, b: &Genotype) -> usize {
    ops(a).iter().zip(ops(b).iter()).filter(|(x, y)| x != y).count()
}

#[test]
fn children_descend_from_the_population() {
    let obj = landscape();
    let clock = WallClock::start();
    let cfg = SearchConfig { seed: 1, max_iterations: Some(1), ..SearchConfig::default() };
    let mut s = Search::new(cfg, &obj, &clock).unwrap();
    s.init_population().unwrap();
    for _ in 0..60 {
        let before: Vec<Individual> = s.population().to_vec();
        let born = s.step().unwrap();
        assert_eq!(born.len(), 3);
        // Two mutants, each one edit away from some member; the crossover
        // child takes every gene from one of two members.
        for m in &born[..2] {
            assert!(before.iter().any(|p| edit_distance(&p.genotype, &m.genotype) == 1));
        }
        let child = ops(&born[2].genotype);
        let ok = before.iter().any(|a| {
            before.iter().any(|b| (0..6).all(|e| child[e] == ops(&a.genotype)[e] || child[e] == ops(&b.genotype)[e]))
        });
        assert!(ok, "crossover child has a foreign gene");
        assert_eq!(s.population().len(), 25);
    }
}

#[test]
fn pair_sampling_breeds_from_both_sampled_members() {
    // With N = n = 2 the sample is the whole population, so the parents are
    // exactly its two members in fitness order.
    let obj = landscape();
    let clock = WallClock::start();
    let cfg = SearchConfig { seed: 2, population: 2, sample: 2, max_iterations: Some(1), ..SearchConfig::default() };
    let mut s = Search::new(cfg, &obj, &clock).unwrap();
    s.init_population().unwrap();
    for _ in 0..30 {
        let before: Vec<Individual> = s.population().to_vec();
        let born = s.step().unwrap();
        let f = |i: &Individual| s.fitness(&i.score);
        let (first, second) = if (f(&before[0]), before[0].birth) >= (f(&before[1]), before[1].birth) {
            (&before[0], &before[1])
        } else {
            (&before[1], &before[0])
        };
        assert_eq!(edit_distance(&first.genotype, &born[0].genotype), 1);
        assert_eq!(edit_distance(&second.genotype, &born[1].genotype), 1);
    }
}

#[test]
fn best_is_the_argmax_over_everything_explored() {
    let obj = landscape();
    for seed in 0..5 {
        let clock = WallClock::start();
        let cfg = SearchConfig { seed, max_iterations: Some(40), ..SearchConfig::default() };
        let mut s = Search::new(cfg, &obj, &clock).unwrap();
        s.init_population().unwrap();
        for _ in 0..40 {
            s.step().unwrap();
        }
        let max = s.explored().map(|(_, f)| f).fold(f64::NEG_INFINITY, f64::max);
        let res = s.finish().unwrap();
        assert_eq!(res.best.fitness, max);
        let mut prev = f64::NEG_INFINITY;
        for h in &res.history {
            assert!(h.best_fitness >= prev, "direct fitness never decreases");
            prev = h.best_fitness;
        }
    }
}

#[test]
fn duplicates_are_recalled_not_re_explored() {
    let obj = landscape();
    let cfg = SearchConfig { seed: 3, max_iterations: Some(300), ..SearchConfig::default() };
    let res = run_search(&cfg, &obj).unwrap();
    assert_eq!(res.evaluations, 25 + 3 * 300);
    assert!(res.explored < res.evaluations);
}

#[test]
fn evaluation_budget_overshoots_by_at_most_one_step() {
    let obj = landscape();
    for (algorithm, per_step) in [(Algorithm::FreeRea, 3), (Algorithm::FreeReaMinus, 1)] {
        for budget in [25, 26, 100, 101, 102] {
            let cfg = SearchConfig { seed: 4, max_evaluations: Some(budget), algorithm, ..SearchConfig::default() };
            let res = run_search(&cfg, &obj).unwrap();
            assert!(res.evaluations >= budget && res.evaluations < budget + per_step, "{budget}: {}", res.evaluations);
        }
    }
}

#[test]
fn virtual_time_budget_is_reproducible() {
    let obj = landscape();
    let run = || {
        let clock = VirtualClock::new(Duration::from_millis(7));
        let cfg = SearchConfig { seed: 5, time_budget_secs: Some(2.0), ..SearchConfig::default() };
        Search::new(cfg, &obj, &clock).unwrap().run().unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.wall_time <= Duration::from_secs_f64(2.0 + 3.0 * 0.007));
}

#[test]
fn run_seeds_give_distinct_trajectories() {
    let obj = landscape();
    let finals: HashSet<String> = (0..6)
        .map(|r| {
            let cfg = SearchConfig { seed: derive(9, r), max_iterations: Some(5), ..SearchConfig::default() };
            format!("{:?}", run_search(&cfg, &obj).unwrap().history)
        })
        .collect();
    assert_eq!(finals.len(), 6);
}
