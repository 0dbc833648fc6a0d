//! Ageing tournament search.
//!
//! `FreeRea` samples `n` of the `N` individuals, breeds the two fittest
//! into two mutants and one crossover child, kills the oldest individual
//! and truncates back to the best `N`. `FreeReaMinus` is classic regularized
//! evolution: one mutant of the sample's best, then the oldest dies.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::{ExploredRegistry, Terms};
use crate::metrics::{MetricEvaluator, MetricVector, DEFAULT_REPEATS};
use crate::netbuilder::{cost, CostReport, MacroSkeleton};
use crate::searchspace::{crossover, mutate, random_genotype, Family, Genotype, SpaceDescriptor};
use crate::seed::{rng_from, Rng};

/// Produces one child genotype from fixed parents.
type Breeder<'p> = dyn Fn(&mut Rng) -> Result<Genotype> + 'p;

/// Attempts per child slot before the slot is abandoned.
pub const CHILD_RETRY_CAP: usize = 200;
/// Initial-population attempts per individual before duplicates are accepted.
pub const DISTINCT_ATTEMPTS_PER_INDIVIDUAL: usize = 50;
/// Hard cap on initial-population attempts per individual.
pub const INIT_ATTEMPTS_PER_INDIVIDUAL: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[serde(rename = "freerea")]
    FreeRea,
    #[serde(rename = "freerea-minus")]
    FreeReaMinus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub max_flops: Option<u64>,
    pub max_params: Option<u64>,
}

impl ConstraintSpec {
    pub fn new(max_flops: u64, max_params: u64) -> Self {
        ConstraintSpec { max_flops: Some(max_flops), max_params: Some(max_params) }
    }

    pub fn admits(&self, c: &CostReport) -> bool {
        self.max_flops.is_none_or(|f| c.flops <= f) && self.max_params.is_none_or(|p| c.params <= p)
    }
}

/// True iff `g` satisfies every threshold present in `c`.
pub fn feasible(g: &Genotype, sk: &MacroSkeleton, c: Option<&ConstraintSpec>) -> Result<bool> {
    match c {
        None => Ok(true),
        Some(c) => Ok(c.admits(&cost(g, sk)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub space: Family,
    pub skeleton: MacroSkeleton,
    /// Population size `N`.
    pub population: usize,
    /// Tournament sample size `n`.
    pub sample: usize,
    pub time_budget_secs: Option<f64>,
    pub max_iterations: Option<usize>,
    pub max_evaluations: Option<usize>,
    pub constraints: Option<ConstraintSpec>,
    pub algorithm: Algorithm,
    pub repeats: usize,
    pub seed: u64,
    pub terms: Terms,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            space: Family::Nats,
            skeleton: MacroSkeleton::default(),
            population: 25,
            sample: 5,
            time_budget_secs: None,
            max_iterations: None,
            max_evaluations: None,
            constraints: None,
            algorithm: Algorithm::FreeRea,
            repeats: DEFAULT_REPEATS,
            seed: 0,
            terms: Terms::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample < 2 || self.sample > self.population {
            return bad(format!("need 2 <= n <= N, got n = {}, N = {}", self.sample, self.population));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".to_string());
        }
        if self.time_budget_secs.is_none() && self.max_iterations.is_none() && self.max_evaluations.is_none() {
            return bad("a time, iteration or evaluation budget is required".to_string());
        }
        if let Some(t) = self.time_budget_secs {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("time budget {t} is not a finite nonnegative number"));
            }
        }
        if let Some(c) = &self.constraints {
            if c.max_flops == Some(0) || c.max_params == Some(0) {
                return bad("constraint thresholds must be positive".to_string());
            }
        }
        self.skeleton.validate()?;
        if (self.sample as f64) / (self.population as f64) < 0.20 {
            log::warn!("n/N = {}/{} is below 0.20; selection pressure will be weak", self.sample, self.population);
        }
        Ok(())
    }
}

/// Raw evaluation of an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    /// Training-free proxies, ranked through the explored-set normalization.
    Proxy(MetricVector),
    /// A fitness value used as is (tabular accuracy, synthetic landscapes).
    Direct(f64),
}

pub trait Objective: Sync {
    /// Must be a pure function of the genotype.
    fn evaluate(&self, g: &Genotype) -> Result<Score>;

    /// Precomputed cost of `g`, if the objective knows it (tabular
    /// benchmarks usually do). Otherwise the search builds the network.
    fn cost(&self, _g: &Genotype) -> Option<CostReport> {
        None
    }
}

impl Objective for MetricEvaluator {
    fn evaluate(&self, g: &Genotype) -> Result<Score> {
        MetricEvaluator::evaluate(self, g).map(Score::Proxy)
    }
}

/// Wraps a closure as a direct-fitness objective.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&Genotype) -> f64 + Sync> Objective for FnObjective<F> {
    fn evaluate(&self, g: &Genotype) -> Result<Score> {
        Ok(Score::Direct((self.0)(g)))
    }
}

pub trait Clock {
    fn elapsed(&self) -> Duration;
    /// Called once per objective evaluation.
    fn on_evaluation(&self) {}
}

pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Deterministic clock that advances by a fixed cost per evaluation.
pub struct VirtualClock {
    nanos: AtomicU64,
    per_evaluation: Duration,
}

impl VirtualClock {
    pub fn new(per_evaluation: Duration) -> Self {
        VirtualClock { nanos: AtomicU64::new(0), per_evaluation }
    }
}

impl Clock for VirtualClock {
    fn elapsed(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::Relaxed))
    }

    fn on_evaluation(&self) {
        self.nanos.fetch_add(self.per_evaluation.as_nanos() as u64, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genotype: Genotype,
    pub hash: u64,
    pub score: Score,
    pub birth: u64,
    /// Filled in only when the search has constraints.
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub evaluations: usize,
    pub explored: usize,
    pub best_fitness: f64,
    pub best_genotype: Genotype,
    #[serde(skip)]
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub genotype: Genotype,
    pub fitness: f64,
    pub score: Score,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: SearchConfig,
    pub seed: u64,
    pub best: BestRecord,
    /// Distinct architectures evaluated (|J|).
    pub explored: usize,
    /// Objective queries, duplicates included.
    pub evaluations: usize,
    pub iterations: usize,
    pub history: Vec<HistoryEntry>,
    #[serde(skip)]
    pub wall_time: Duration,
}

struct Explored {
    genotype: Genotype,
    score: Score,
    cost: CostReport,
}

/// State of one search run.
pub struct Search<'a> {
    cfg: SearchConfig,
    objective: &'a dyn Objective,
    clock: &'a dyn Clock,
    rng: Rng,
    space: SpaceDescriptor,
    registry: ExploredRegistry,
    explored: Vec<Explored>,
    index: HashMap<u64, usize>,
    costs: HashMap<u64, CostReport>,
    population: Vec<Individual>,
    next_birth: u64,
    evaluations: usize,
    iterations: usize,
    skipped_slots: usize,
    history: Vec<HistoryEntry>,
}

impl<'a> Search<'a> {
    pub fn new(cfg: SearchConfig, objective: &'a dyn Objective, clock: &'a dyn Clock) -> Result<Self> {
        cfg.validate()?;
        Ok(Search {
            rng: rng_from(cfg.seed),
            space: SpaceDescriptor::of(cfg.space),
            registry: ExploredRegistry::new(cfg.terms),
            objective,
            clock,
            explored: Vec::new(),
            index: HashMap::new(),
            costs: HashMap::new(),
            population: Vec::new(),
            next_birth: 0,
            evaluations: 0,
            iterations: 0,
            skipped_slots: 0,
            history: Vec::new(),
            cfg,
        })
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    pub fn registry(&self) -> &ExploredRegistry {
        &self.registry
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn skipped_slots(&self) -> usize {
        self.skipped_slots
    }

    /// Current fitness of a score under the live normalization.
    pub fn fitness(&self, score: &Score) -> f64 {
        match score {
            Score::Direct(v) => *v,
            Score::Proxy(v) => self.registry.fitness(v).unwrap_or(0.0),
        }
    }

    fn cost_of(&mut self, g: &Genotype, hash: u64) -> Result<CostReport> {
        if let Some(c) = self.costs.get(&hash) {
            return Ok(*c);
        }
        let c = match (self.cfg.constraints, self.objective.cost(g)) {
            (None, _) => CostReport::default(),
            (Some(_), Some(known)) => known,
            (Some(_), None) => cost(g, &self.cfg.skeleton)?,
        };
        self.costs.insert(hash, c);
        Ok(c)
    }

    fn is_feasible(&mut self, g: &Genotype) -> Result<bool> {
        let Some(c) = self.cfg.constraints else { return Ok(true) };
        let hash = g.canonical_hash();
        Ok(c.admits(&self.cost_of(g, hash)?))
    }

    /// Evaluates (or recalls) `g` and wraps it as a newborn individual.
    fn birth(&mut self, g: Genotype) -> Result<Individual> {
        let hash = g.canonical_hash();
        self.evaluations += 1;
        self.clock.on_evaluation();
        let (score, cost) = match self.index.get(&hash) {
            Some(&i) => (self.explored[i].score, self.explored[i].cost),
            None => {
                let score = self.objective.evaluate(&g)?;
                let cost = self.cost_of(&g, hash)?;
                if let Score::Proxy(v) = score {
                    self.registry.register(hash, v);
                }
                self.index.insert(hash, self.explored.len());
                self.explored.push(Explored { genotype: g.clone(), score, cost });
                (score, cost)
            }
        };
        let birth = self.next_birth;
        self.next_birth += 1;
        Ok(Individual { genotype: g, hash, score, birth, cost })
    }

    pub fn init_population(&mut self) -> Result<()> {
        let n = self.cfg.population;
        let distinct_cap = DISTINCT_ATTEMPTS_PER_INDIVIDUAL * n;
        let hard_cap = INIT_ATTEMPTS_PER_INDIVIDUAL * n;
        let mut chosen: Vec<Genotype> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut attempts = 0;
        while chosen.len() < n && attempts < hard_cap {
            attempts += 1;
            let g = random_genotype(&self.space, &mut self.rng)?;
            if !self.is_feasible(&g)? {
                continue;
            }
            if !seen.insert(g.canonical_hash()) && attempts <= distinct_cap {
                continue;
            }
            chosen.push(g);
        }
        if chosen.is_empty() {
            return Err(Error::InfeasibleSpace(attempts));
        }
        let mut k = 0;
        while chosen.len() < n {
            chosen.push(chosen[k].clone());
            k += 1;
        }
        self.population.clear();
        for g in chosen {
            let ind = self.birth(g)?;
            self.population.push(ind);
        }
        self.record_history();
        Ok(())
    }

    /// Ordering used for parent choice and truncation: fitter first, then
    /// younger, then smaller hash.
    fn ranked(&self, members: impl Iterator<Item = usize>) -> Vec<usize> {
        let mut keyed: Vec<(f64, u64, u64, usize)> = members
            .map(|i| {
                let ind = &self.population[i];
                (self.fitness(&ind.score), ind.birth, ind.hash, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        keyed.into_iter().map(|k| k.3).collect()
    }

    /// Draws a feasible child, retrying up to `CHILD_RETRY_CAP` times.
    fn feasible_child(&mut self, make: &Breeder) -> Result<Option<Genotype>> {
        for _ in 0..CHILD_RETRY_CAP {
            let child = match make(&mut self.rng) {
                Ok(g) => g,
                Err(Error::ValidityExhausted(_)) => continue,
                Err(e) => return Err(e),
            };
            if self.is_feasible(&child)? {
                return Ok(Some(child));
            }
        }
        log::warn!("{}", Error::RetryCapExceeded(CHILD_RETRY_CAP));
        self.skipped_slots += 1;
        Ok(None)
    }

    /// One tournament step; returns the newly born individuals.
    pub fn step(&mut self) -> Result<Vec<Individual>> {
        let n = self.population.len();
        let picks: Vec<usize> = sample(&mut self.rng, n, self.cfg.sample).into_vec();
        let ranked = self.ranked(picks.into_iter());
        let first = self.population[ranked[0]].genotype.clone();
        let mut children = Vec::new();
        match self.cfg.algorithm {
            Algorithm::FreeRea => {
                let second = self.population[ranked[1]].genotype.clone();
                let slots: [&Breeder; 3] = [
                    &|rng| mutate(&first, rng),
                    &|rng| mutate(&second, rng),
                    &|rng| crossover(&first, &second, rng),
                ];
                for make in slots {
                    if let Some(child) = self.feasible_child(make)? {
                        children.push(child);
                    }
                }
            }
            Algorithm::FreeReaMinus => {
                if let Some(child) = self.feasible_child(&|rng| mutate(&first, rng))? {
                    children.push(child);
                }
            }
        }
        let mut born = Vec::new();
        for child in children {
            let ind = self.birth(child)?;
            born.push(ind.clone());
            self.population.push(ind);
        }
        if !born.is_empty() {
            let oldest = (0..self.population.len())
                .min_by_key(|&i| self.population[i].birth)
                .expect("population is non-empty");
            self.population.remove(oldest);
            let keep = self.ranked(0..self.population.len());
            let mut survivors: Vec<usize> = keep.into_iter().take(self.cfg.population).collect();
            survivors.sort_unstable();
            let mut it = survivors.into_iter().peekable();
            let mut idx = 0;
            self.population.retain(|_| {
                let keep = it.peek() == Some(&idx);
                if keep {
                    it.next();
                }
                idx += 1;
                keep
            });
        }
        self.iterations += 1;
        self.record_history();
        Ok(born)
    }

    /// Argmax of the current fitness over every explored architecture.
    fn best_explored(&self) -> usize {
        let mut best = 0;
        let mut best_f = f64::NEG_INFINITY;
        for (i, e) in self.explored.iter().enumerate() {
            let f = self.fitness(&e.score);
            if f > best_f {
                best_f = f;
                best = i;
            }
        }
        best
    }

    fn record_history(&mut self) {
        let best = self.best_explored();
        self.history.push(HistoryEntry {
            step: self.iterations,
            evaluations: self.evaluations,
            explored: self.explored.len(),
            best_fitness: self.fitness(&self.explored[best].score),
            best_genotype: self.explored[best].genotype.clone(),
            elapsed_secs: self.clock.elapsed().as_secs_f64(),
        });
    }

    fn budget_left(&self) -> bool {
        if self.cfg.max_iterations.is_some_and(|m| self.iterations >= m) {
            return false;
        }
        if self.cfg.max_evaluations.is_some_and(|m| self.evaluations >= m) {
            return false;
        }
        if self.cfg.time_budget_secs.is_some_and(|t| self.clock.elapsed().as_secs_f64() >= t) {
            return false;
        }
        true
    }

    pub fn run(mut self) -> Result<SearchResult> {
        self.init_population()?;
        while self.budget_left() {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<SearchResult> {
        let best = self.best_explored();
        let e = &self.explored[best];
        // Costs are only computed eagerly under constraints.
        let best_cost = if self.cfg.constraints.is_some() { e.cost } else { cost(&e.genotype, &self.cfg.skeleton)? };
        Ok(SearchResult {
            seed: self.cfg.seed,
            best: BestRecord { genotype: e.genotype.clone(), fitness: self.fitness(&e.score), score: e.score, cost: best_cost },
            explored: self.explored.len(),
            evaluations: self.evaluations,
            iterations: self.iterations,
            history: self.history,
            wall_time: self.clock.elapsed(),
            config: self.cfg,
        })
    }

    /// Every explored architecture with its current fitness.
    pub fn explored(&self) -> impl Iterator<Item = (&Genotype, f64)> {
        self.explored.iter().map(|e| (&e.genotype, self.fitness(&e.score)))
    }
}

/// Runs a search against the wall clock.
pub fn run_search(cfg: &SearchConfig, objective: &dyn Objective) -> Result<SearchResult> {
    let clock = WallClock::start();
    Search::new(cfg.clone(), objective, &clock)?.run()
}

/// Runs a search scored by the training-free proxies.
pub fn run_proxy_search(cfg: &SearchConfig) -> Result<SearchResult> {
    let evaluator = MetricEvaluator::new(cfg.skeleton.clone(), cfg.repeats, cfg.seed);
    run_search(cfg, &evaluator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::Op;

    fn conv3x3_count() -> FnObjective<impl Fn(&Genotype) -> f64 + Sync> {
        FnObjective(|g: &Genotype| g.count_op(Op::Conv3x3) as f64)
    }

    fn cfg(seed: u64) -> SearchConfig {
        SearchConfig { seed, max_iterations: Some(50), ..SearchConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig { sample: 1, ..cfg(0) }.validate().is_err());
        assert!(SearchConfig { sample: 30, ..cfg(0) }.validate().is_err());
        assert!(SearchConfig { max_iterations: None, ..cfg(0) }.validate().is_err());
        assert!(cfg(0).validate().is_ok());
    }

    #[test]
    fn population_size_and_ageing() {
        let obj = conv3x3_count();
        let clock = WallClock::start();
        let mut s = Search::new(cfg(1), &obj, &clock).unwrap();
        s.init_population().unwrap();
        assert_eq!(s.population().len(), 25);
        for _ in 0..100 {
            let oldest = s.population().iter().map(|i| i.birth).min().unwrap();
            let born = s.step().unwrap();
            assert_eq!(s.population().len(), 25);
            assert!(!born.is_empty());
            assert!(s.population().iter().all(|i| i.birth != oldest));
            assert!(s.population().iter().map(|i| i.birth).min().unwrap() > oldest);
        }
    }

    #[test]
    fn zero_iterations_reports_best_of_initial_population() {
        let obj = conv3x3_count();
        let c = SearchConfig { max_iterations: Some(0), ..cfg(3) };
        let r = run_search(&c, &obj).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.evaluations, 25);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn full_sample_selects_global_top_two() {
        let obj = conv3x3_count();
        let clock = WallClock::start();
        let c = SearchConfig { sample: 25, ..cfg(4) };
        let mut s = Search::new(c, &obj, &clock).unwrap();
        s.init_population().unwrap();
        let top = s.ranked(0..25);
        let expected: Vec<Genotype> = top[..2].iter().map(|&i| s.population()[i].genotype.clone()).collect();
        // Replay the step's draws: sampling all indices does not change the
        // ranking, so children descend from the global top two.
        let born = s.step().unwrap();
        let (Genotype::Nats(a), Genotype::Nats(b)) = (&expected[0], &expected[1]) else { unreachable!() };
        let differs = |x: &[Op; 6], y: &[Op; 6]| x.iter().zip(y).filter(|(p, q)| p != q).count();
        let Genotype::Nats(m1) = &born[0].genotype else { unreachable!() };
        let Genotype::Nats(m2) = &born[1].genotype else { unreachable!() };
        assert_eq!(differs(m1, a), 1);
        assert_eq!(differs(m2, b), 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let obj = conv3x3_count();
        let a = run_search(&cfg(9), &obj).unwrap();
        let b = run_search(&cfg(9), &obj).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn minus_variant_diverges() {
        let obj = conv3x3_count();
        let a = run_search(&cfg(5), &obj).unwrap();
        let b = run_search(&SearchConfig { algorithm: Algorithm::FreeReaMinus, ..cfg(5) }, &obj).unwrap();
        assert_eq!(b.evaluations, 25 + 50);
        assert_eq!(a.evaluations, 25 + 150);
        assert_ne!(a.history, b.history);
    }

    #[test]
    fn virtual_clock_bounds_the_run() {
        let obj = conv3x3_count();
        let clock = VirtualClock::new(Duration::from_millis(100));
        let c = SearchConfig { max_iterations: None, time_budget_secs: Some(10.0), ..cfg(2) };
        let r = Search::new(c, &obj, &clock).unwrap().run().unwrap();
        // 25 initial evaluations use 2.5 s; each step costs 0.3 s.
        assert_eq!(r.iterations, 25);
        assert!(r.wall_time <= Duration::from_secs_f64(10.0 + 0.3));
    }

    #[test]
    fn constraints_are_respected() {
        let obj = conv3x3_count();
        let limit = ConstraintSpec::new(40_000_000, 300_000);
        let c = SearchConfig { constraints: Some(limit), max_iterations: Some(30), ..cfg(6) };
        let clock = WallClock::start();
        let mut s = Search::new(c.clone(), &obj, &clock).unwrap();
        s.init_population().unwrap();
        let mut added: Vec<Individual> = s.population().to_vec();
        for _ in 0..30 {
            added.extend(s.step().unwrap());
        }
        for ind in &added {
            assert!(feasible(&ind.genotype, &c.skeleton, Some(&limit)).unwrap());
        }
    }

    #[test]
    fn tight_constraints_admit_only_parameter_free_cells() {
        // At the bare skeleton's cost only skip/zero cells remain feasible.
        let sk = MacroSkeleton::default();
        let zero = Genotype::nats([Op::Zero; 6]).unwrap();
        let base = cost(&zero, &sk).unwrap();
        let obj = conv3x3_count();
        let c = SearchConfig {
            constraints: Some(ConstraintSpec::new(base.flops, base.params)),
            population: 4,
            sample: 2,
            max_iterations: Some(1),
            ..cfg(1)
        };
        let clock = WallClock::start();
        let mut s = Search::new(c, &obj, &clock).unwrap();
        match s.init_population() {
            Err(Error::InfeasibleSpace(_)) => {}
            Ok(()) => {
                for ind in s.population() {
                    assert_eq!(ind.genotype.count_op(Op::Skip) + ind.genotype.count_op(Op::Zero), 6);
                }
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
