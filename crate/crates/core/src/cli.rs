//! Command-line front end.
//!
//! Precedence for every search setting is: command-line flag, then the
//! `--config` TOML file, then the built-in default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::benchio::{
    correlation_report, correlation_sample, exhaustive_best, synthetic_nats_table, write_correlation_csv, TabularBenchmark,
};
use crate::error::Error;
use crate::evolve::{run_search, Algorithm, ConstraintSpec, Objective, SearchConfig, SearchResult};
use crate::fitness::Terms;
use crate::metrics::{evaluate, read_batch_file, synthetic_batch, BatchSource, MetricEvaluator};
use crate::netbuilder::{cost, MacroSkeleton};
use crate::searchspace::{enumerate_space, Family, Genotype, SpaceDescriptor};
use crate::seed::derive;

/// Default time budget in seconds when no budget is given at all.
pub const DEFAULT_TIME_BUDGET: f64 = 45.0;

/// Population/sample pairs of the hyper-parameter sweep.
pub const NN_PAIRS: [(usize, usize); 6] = [(25, 5), (100, 2), (100, 50), (20, 20), (100, 25), (64, 16)];

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs: exit code 1.
    Config(String),
    /// Failures while running: exit code 2.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::InvalidSkeleton(_)
            | Error::GenotypeParse { .. }
            | Error::InvalidGenotype(_)
            | Error::Parse { .. }
            | Error::DuplicateGenotype { .. }
            | Error::BatchFile(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Errors raised while reading user-supplied inputs are configuration errors.
fn input<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Parser)]
#[command(name = "freerea", version, about = "Training-free evolutionary neural architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one or more searches.
    Search(SearchArgs),
    /// Compute the training-free metrics of one genotype.
    Score(ScoreArgs),
    /// Correlate metrics with a tabular benchmark's accuracies.
    Correlate(CorrelateArgs),
    /// Leave-one-out fitness ablation and population/sample sweep.
    Ablate(AblateArgs),
    /// Parameter and FLOP counts of one genotype.
    Cost(CostArgs),
    /// List the NATS search space.
    Enumerate(EnumerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoArg {
    Freerea,
    FreereaMinus,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Freerea => Algorithm::FreeRea,
            AlgoArg::FreereaMinus => Algorithm::FreeReaMinus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    /// Training-free proxies.
    Proxy,
    /// Accuracy looked up in the `--tabular` file.
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceArg {
    Nats,
    Nb101,
}

impl From<SpaceArg> for Family {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Nats => Family::Nats,
            SpaceArg::Nb101 => Family::Nb101,
        }
    }
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    #[arg(long, value_enum)]
    pub space: Option<SpaceArg>,
    /// Macro skeleton TOML file.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    #[arg(long, env = "FREEREA_SEED")]
    pub seed: Option<u64>,
    /// Settings file (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Metric repeats per architecture.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct SearchFlags {
    /// Time budget in seconds.
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub max_evals: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// FLOPs and parameter limits, e.g. `4e7,3e5`.
    #[arg(long)]
    pub constraints: Option<String>,
    #[arg(long)]
    pub tabular: Option<PathBuf>,
    #[arg(long)]
    pub no_ls: bool,
    #[arg(long)]
    pub no_lr: bool,
    #[arg(long)]
    pub no_skip: bool,
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Population size N.
    #[arg(long)]
    pub population: Option<usize>,
    /// Tournament sample size n.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the SVG trajectory plot.
    #[arg(long)]
    pub no_plot: bool,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: SearchFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    pub genotype: String,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Linear-regions batch file; a synthetic batch is used otherwise.
    #[arg(long)]
    pub batch: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    pub genotype: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub tabular: PathBuf,
    /// Number of sampled architectures; the whole space when omitted.
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    Fitness,
    Nn,
    Both,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "fitness")]
    pub mode: AblateMode,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: SearchFlags,
}

#[derive(Debug, Args)]
pub struct EnumerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also print parameters and FLOPs under the skeleton.
    #[arg(long)]
    pub with_cost: bool,
    /// Emit a synthetic accuracy table (seeded by `--seed`) in the tabular CSV schema.
    #[arg(long)]
    pub synthetic_table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub space: Option<SpaceArg>,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub time: Option<f64>,
    pub max_iters: Option<usize>,
    pub max_evals: Option<usize>,
    pub runs: Option<usize>,
    pub jobs: Option<usize>,
    pub constraints: Option<String>,
    pub tabular: Option<PathBuf>,
    pub no_ls: Option<bool>,
    pub no_lr: Option<bool>,
    pub no_skip: Option<bool>,
    pub algo: Option<AlgoArg>,
    pub objective: Option<ObjectiveArg>,
    pub population: Option<usize>,
    pub sample: Option<usize>,
    pub skeleton: Option<MacroSkeleton>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings of a search-like command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub search: SearchConfig,
    pub runs: usize,
    pub jobs: usize,
    pub objective: ObjectiveArg,
    pub tabular: Option<PathBuf>,
    /// True when the seed came from neither a flag, the environment nor the config file.
    pub seed_drawn: bool,
}

impl Resolved {
    /// The same settings as a config file that reproduces the run.
    pub fn to_file_config(&self) -> FileConfig {
        let s = &self.search;
        FileConfig {
            space: Some(match s.space {
                Family::Nats => SpaceArg::Nats,
                Family::Nb101 => SpaceArg::Nb101,
            }),
            seed: Some(s.seed),
            repeats: Some(s.repeats),
            time: s.time_budget_secs,
            max_iters: s.max_iterations,
            max_evals: s.max_evaluations,
            runs: Some(self.runs),
            jobs: Some(self.jobs),
            constraints: s.constraints.map(|c| {
                format!("{},{}", c.max_flops.map_or("inf".into(), |v| v.to_string()), c.max_params.map_or("inf".into(), |v| v.to_string()))
            }),
            tabular: self.tabular.clone(),
            no_ls: Some(!s.terms.log_synflow),
            no_lr: Some(!s.terms.linear_regions),
            no_skip: Some(!s.terms.skip),
            algo: Some(match s.algorithm {
                Algorithm::FreeRea => AlgoArg::Freerea,
                Algorithm::FreeReaMinus => AlgoArg::FreereaMinus,
            }),
            objective: Some(self.objective),
            population: Some(s.population),
            sample: Some(s.sample),
            skeleton: Some(s.skeleton.clone()),
        }
    }
}

/// Parses `flops,params`; each side is a number (scientific notation
/// allowed) or `inf` for no limit.
pub fn parse_constraints(text: &str) -> CliResult<ConstraintSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(CliError::Config(format!("constraints must be `flops,params`, got `{text}`")));
    }
    let limit = |s: &str| -> CliResult<Option<u64>> {
        if s.eq_ignore_ascii_case("inf") {
            return Ok(None);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 1.0 && v.is_finite() => Ok(Some(v.floor() as u64)),
            _ => Err(CliError::Config(format!("constraint `{s}` is not a positive number"))),
        }
    };
    Ok(ConstraintSpec { max_flops: limit(parts[0])?, max_params: limit(parts[1])? })
}

fn load_skeleton(path: &Path) -> CliResult<MacroSkeleton> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    input(MacroSkeleton::from_toml(&text))
}

fn fresh_seed() -> u64 {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
    derive(nanos, std::process::id() as u64)
}

fn file_config(common: &CommonArgs) -> CliResult<FileConfig> {
    common.config.as_deref().map(FileConfig::load).transpose().map(Option::unwrap_or_default)
}

fn resolve_skeleton(common: &CommonArgs, file: &FileConfig) -> CliResult<MacroSkeleton> {
    match (&common.skeleton, &file.skeleton) {
        (Some(p), _) => load_skeleton(p),
        (None, Some(sk)) => {
            input(sk.validate())?;
            Ok(sk.clone())
        }
        (None, None) => Ok(MacroSkeleton::default()),
    }
}

fn resolve_seed(common: &CommonArgs, file: &FileConfig) -> (u64, bool) {
    match common.seed.or(file.seed) {
        Some(s) => (s, false),
        None => (fresh_seed(), true),
    }
}

pub fn resolve(common: &CommonArgs, flags: &SearchFlags) -> CliResult<Resolved> {
    let file = file_config(common)?;
    let skeleton = resolve_skeleton(common, &file)?;
    let (seed, seed_drawn) = resolve_seed(common, &file);
    let time = flags.time.or(file.time);
    let max_iterations = flags.max_iters.or(file.max_iters);
    let max_evaluations = flags.max_evals.or(file.max_evals);
    let time = if time.is_none() && max_iterations.is_none() && max_evaluations.is_none() { Some(DEFAULT_TIME_BUDGET) } else { time };
    let constraints = flags.constraints.clone().or(file.constraints.clone()).map(|c| parse_constraints(&c)).transpose()?;
    let terms = Terms {
        log_synflow: !(flags.no_ls || file.no_ls.unwrap_or(false)),
        linear_regions: !(flags.no_lr || file.no_lr.unwrap_or(false)),
        skip: !(flags.no_skip || file.no_skip.unwrap_or(false)),
    };
    let defaults = SearchConfig::default();
    let search = SearchConfig {
        space: common.space.or(file.space).map(Family::from).unwrap_or(defaults.space),
        skeleton,
        population: flags.population.or(file.population).unwrap_or(defaults.population),
        sample: flags.sample.or(file.sample).unwrap_or(defaults.sample),
        time_budget_secs: time,
        max_iterations,
        max_evaluations,
        constraints,
        algorithm: flags.algo.or(file.algo).map(Algorithm::from).unwrap_or(defaults.algorithm),
        repeats: common.repeats.or(file.repeats).unwrap_or(defaults.repeats),
        seed,
        terms,
    };
    input(search.validate())?;
    let runs = flags.runs.or(file.runs).unwrap_or(1);
    let jobs = flags.jobs.or(file.jobs).unwrap_or(1);
    if runs == 0 || jobs == 0 {
        return Err(CliError::Config("--runs and --jobs must be at least 1".into()));
    }
    let tabular = flags.tabular.clone().or(file.tabular.clone());
    let objective = flags.objective.or(file.objective).unwrap_or(ObjectiveArg::Proxy);
    if objective == ObjectiveArg::Table && tabular.is_none() {
        return Err(CliError::Config("--objective table needs --tabular".into()));
    }
    Ok(Resolved { search, runs, jobs, objective, tabular, seed_drawn })
}

/// Seed of run `r` under base seed `base`.
pub fn run_seed(base: u64, r: usize) -> u64 {
    derive(base, r as u64)
}

/// Runs `f` on every config using up to `jobs` worker threads; results keep
/// the input order.
pub fn run_parallel<T: Send>(
    configs: &[SearchConfig],
    jobs: usize,
    f: &(dyn Fn(&SearchConfig) -> crate::Result<T> + Sync),
) -> crate::Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<crate::Result<T>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(configs.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = f(&configs[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("result slot").expect("every slot filled")).collect()
}

fn load_tabular(path: &Option<PathBuf>) -> CliResult<Option<TabularBenchmark>> {
    path.as_deref().map(|p| input(TabularBenchmark::load(p))).transpose()
}

fn search_one(cfg: &SearchConfig, objective: ObjectiveArg, bench: Option<&TabularBenchmark>) -> crate::Result<SearchResult> {
    match objective {
        ObjectiveArg::Proxy => {
            let evaluator = MetricEvaluator::new(cfg.skeleton.clone(), cfg.repeats, cfg.seed);
            run_search(cfg, &evaluator)
        }
        ObjectiveArg::Table => run_search(cfg, bench.expect("table objective requires a table") as &dyn Objective),
    }
}

/// One run as written to `run-XXX.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Tabular accuracy of the best architecture, when a table is loaded.
    pub test_accuracy: Option<f64>,
    pub result: SearchResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: Vec<String>,
    pub seed: u64,
    pub seed_drawn: bool,
    pub resolved: FileConfig,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Executes `resolved.runs` searches with derived seeds.
pub fn run_searches(resolved: &Resolved, bench: Option<&TabularBenchmark>) -> crate::Result<Vec<RunRecord>> {
    let configs: Vec<SearchConfig> = (0..resolved.runs)
        .map(|r| SearchConfig { seed: run_seed(resolved.search.seed, r), ..resolved.search.clone() })
        .collect();
    let results = run_parallel(&configs, resolved.jobs, &|cfg| search_one(cfg, resolved.objective, bench))?;
    Ok(results
        .into_iter()
        .enumerate()
        .map(|(run, result)| RunRecord {
            run,
            seed: configs[run].seed,
            test_accuracy: bench.and_then(|b| b.accuracy(&result.best.genotype)),
            result,
        })
        .collect())
}

pub fn aggregate_csv(records: &[RunRecord]) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "seed", "best_genotype", "best_fitness", "test_accuracy", "flops", "params", "evaluations", "explored", "iterations"])?;
    for r in records {
        let res = &r.result;
        w.write_record([
            r.run.to_string(),
            r.seed.to_string(),
            res.best.genotype.to_string(),
            format!("{:.10}", res.best.fitness),
            r.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            res.best.cost.flops.to_string(),
            res.best.cost.params.to_string(),
            res.evaluations.to_string(),
            res.explored.to_string(),
            res.iterations.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
}

/// Mean ± std of best fitness and, with a table, accuracy and regret.
pub fn summary_csv(records: &[RunRecord], optimum: Option<f64>) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["quantity", "runs", "mean", "std", "optimum", "regret"])?;
    let fit: Vec<f64> = records.iter().map(|r| r.result.best.fitness).collect();
    let (m, s) = mean_std(&fit);
    w.write_record(["best_fitness".to_string(), fit.len().to_string(), format!("{m:.10}"), format!("{s:.10}"), String::new(), String::new()])?;
    let acc: Vec<f64> = records.iter().filter_map(|r| r.test_accuracy).collect();
    if !acc.is_empty() {
        let (m, s) = mean_std(&acc);
        let opt = optimum.map(|o| format!("{o:.6}")).unwrap_or_default();
        let regret = optimum.map(|o| format!("{:.6}", o - m)).unwrap_or_default();
        w.write_record(["test_accuracy".to_string(), acc.len().to_string(), format!("{m:.6}"), format!("{s:.6}"), opt, regret])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
}

/// Best-so-far fitness against evaluation count (log-scaled x axis), one
/// polyline per run. Plotting against evaluations rather than wall time
/// keeps the file reproducible.
pub fn trajectory_svg(records: &[RunRecord]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let points: Vec<Vec<(f64, f64)>> = records
        .iter()
        .map(|r| r.result.history.iter().map(|h| ((h.evaluations.max(1) as f64).log10(), h.best_fitness)).collect())
        .collect();
    let all = points.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        if y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x1.partial_cmp(&x0) != Some(std::cmp::Ordering::Greater) {
        x1 = x0 + 1.0;
    }
    if y1.partial_cmp(&y0) != Some(std::cmp::Ordering::Greater) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{M} {M} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
        H - M,
        W - M
    );
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">evaluations (log scale)</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(svg, r#"<text x="12" y="{:.1}" font-size="12" transform="rotate(-90 12 {:.1})" text-anchor="middle">best fitness</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(svg, r#"<text x="{M}" y="{:.1}" font-size="10">{:.0}</text>"#, H - M + 14.0, 10f64.powf(x0));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{:.0}</text>"#, W - M, H - M + 14.0, 10f64.powf(x1));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y1:.4}</text>"#, M - 4.0, M + 4.0);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y0:.4}</text>"#, M - 4.0, H - M);
    for (i, run) in points.iter().enumerate() {
        let hue = (i * 47) % 360;
        let pts: Vec<String> =
            run.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="hsl({hue},70%,40%)" fill="none" stroke-width="1.2"/>"#, pts.join(" "));
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_file(path: &Path, contents: &[u8], outputs: &mut Vec<PathBuf>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(Error::Io(e)))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

fn prepare_out(out: &Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    Ok(out.clone())
}

fn json_pretty<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Runtime(e.into()))
}

fn write_manifest(dir: &Path, argv: &[String], resolved: &Resolved, started: f64, mut outputs: Vec<PathBuf>) -> CliResult<()> {
    let config_path = dir.join("config.toml");
    let toml_text = toml::to_string(&resolved.to_file_config()).map_err(|e| CliError::Runtime(Error::InvalidConfig(e.to_string())))?;
    write_file(&config_path, toml_text.as_bytes(), &mut outputs)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: argv.to_vec(),
        seed: resolved.search.seed,
        seed_drawn: resolved.seed_drawn,
        resolved: resolved.to_file_config(),
        started_unix: started,
        finished_unix: unix_now(),
        outputs,
    };
    std::fs::write(dir.join("manifest.json"), json_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_search(args: &SearchArgs, argv: &[String], out: &mut dyn std::io::Write) -> CliResult<()> {
    let started = unix_now();
    let resolved = resolve(&args.common, &args.flags)?;
    let bench = load_tabular(&resolved.tabular)?;
    let records = run_searches(&resolved, bench.as_ref())?;
    let optimum = match &bench {
        Some(b) => match exhaustive_best(b, resolved.search.constraints.as_ref()) {
            Ok(r) => Some(r.test_accuracy),
            Err(e) => {
                log::warn!("no optimum for regret: {e}");
                None
            }
        },
        None => None,
    };
    let aggregate = aggregate_csv(&records)?;
    let summary = summary_csv(&records, optimum)?;
    match prepare_out(&args.flags.out)? {
        Some(dir) => {
            let mut outputs = Vec::new();
            for r in &records {
                write_file(&dir.join(format!("run-{:03}.json", r.run)), json_pretty(r)?.as_bytes(), &mut outputs)?;
            }
            write_file(&dir.join("aggregate.csv"), aggregate.as_bytes(), &mut outputs)?;
            write_file(&dir.join("summary.csv"), summary.as_bytes(), &mut outputs)?;
            if !args.flags.no_plot {
                write_file(&dir.join("trajectory.svg"), trajectory_svg(&records).as_bytes(), &mut outputs)?;
            }
            write_manifest(&dir, argv, &resolved, started, outputs)?;
            write!(out, "{summary}")?;
        }
        None if records.len() == 1 => write!(out, "{}", json_pretty(&records[0])?)?,
        None => write!(out, "{aggregate}{summary}")?,
    }
    if resolved.seed_drawn {
        log::info!("seed {}", resolved.search.seed);
    }
    Ok(())
}

fn parse_genotype(text: &str, family: Option<SpaceArg>) -> CliResult<Genotype> {
    let g: Genotype = input(text.parse())?;
    if let Some(f) = family {
        if g.family() != Family::from(f) {
            return Err(CliError::Config(format!("genotype `{text}` is not in the {} space", Family::from(f))));
        }
    }
    Ok(g)
}

#[derive(Serialize)]
struct ScoreOutput {
    genotype: Genotype,
    canonical_hash: String,
    seed: u64,
    repeats: Vec<crate::metrics::RepeatScores>,
    mean: crate::metrics::MetricVector,
    mean_synflow: f64,
    params: u64,
    flops: u64,
}

fn cmd_score(args: &ScoreArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let file = file_config(&args.common)?;
    let g = parse_genotype(&args.genotype, args.common.space.or(file.space))?;
    let sk = resolve_skeleton(&args.common, &file)?;
    let (seed, drawn) = resolve_seed(&args.common, &file);
    let repeats = args.common.repeats.or(file.repeats).unwrap_or(crate::metrics::DEFAULT_REPEATS);
    if repeats == 0 {
        return Err(CliError::Config("--repeats must be at least 1".into()));
    }
    let batch = match &args.batch {
        Some(p) => input(read_batch_file(p))?,
        None => synthetic_batch(&sk, derive(seed, u64::MAX)),
    };
    let hash = g.canonical_hash();
    let e = evaluate(&g, &sk, repeats, derive(seed, hash), &BatchSource::Fixed(batch))?;
    let c = cost(&g, &sk)?;
    let report = ScoreOutput {
        genotype: g,
        canonical_hash: format!("{hash:016x}"),
        seed,
        repeats: e.repeats,
        mean: e.mean,
        mean_synflow: e.mean_synflow,
        params: c.params,
        flops: c.flops,
    };
    if drawn {
        log::info!("seed {seed}");
    }
    write!(out, "{}", json_pretty(&report)?)?;
    Ok(())
}

fn cmd_cost(args: &CostArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let file = file_config(&args.common)?;
    let g = parse_genotype(&args.genotype, args.common.space.or(file.space))?;
    let sk = resolve_skeleton(&args.common, &file)?;
    let c = cost(&g, &sk)?;
    write!(out, "{}", json_pretty(&serde_json::json!({ "genotype": g, "params": c.params, "flops": c.flops }))?)?;
    Ok(())
}

fn cmd_enumerate(args: &EnumerateArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let file = file_config(&args.common)?;
    let family = args.common.space.or(file.space).map(Family::from).unwrap_or(Family::Nats);
    let sk = resolve_skeleton(&args.common, &file)?;
    let mut buf = Vec::new();
    if args.synthetic_table {
        if family != Family::Nats {
            return Err(CliError::Config("synthetic tables exist for the nats space only".into()));
        }
        let (seed, _) = resolve_seed(&args.common, &file);
        synthetic_nats_table(seed, Some(&sk))?.write_csv(&mut buf)?;
    } else {
        let genotypes = enumerate_space(&SpaceDescriptor::of(family))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        if args.with_cost {
            w.write_record(["genotype", "flops", "params"]).map_err(Error::from)?;
        }
        for g in genotypes {
            if args.with_cost {
                let c = cost(&g, &sk)?;
                w.write_record([g.to_string(), c.flops.to_string(), c.params.to_string()]).map_err(Error::from)?;
            } else {
                w.write_record([g.to_string()]).map_err(Error::from)?;
            }
        }
        w.flush()?;
    }
    match &args.out {
        Some(p) => std::fs::write(p, &buf)?,
        None => out.write_all(&buf)?,
    }
    Ok(())
}

fn cmd_correlate(args: &CorrelateArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let file = file_config(&args.common)?;
    let family = args.common.space.or(file.space).map(Family::from).unwrap_or(Family::Nats);
    let sk = resolve_skeleton(&args.common, &file)?;
    let (seed, _) = resolve_seed(&args.common, &file);
    let repeats = args.common.repeats.or(file.repeats).unwrap_or(crate::metrics::DEFAULT_REPEATS);
    let bench = input(TabularBenchmark::load(&args.tabular))?;
    let sample = correlation_sample(family, args.sample_size, seed)?;
    let rows = correlation_report(&sample, &sk, &bench, repeats, seed)?;
    let mut buf = Vec::new();
    write_correlation_csv(&rows, &mut buf)?;
    match &args.out {
        Some(p) => std::fs::write(p, &buf)?,
        None => out.write_all(&buf)?,
    }
    Ok(())
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub population: usize,
    pub sample: usize,
    pub runs: usize,
    pub fitness_mean: f64,
    pub fitness_std: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    /// Final best fitness of every run, in run order.
    #[serde(skip)]
    pub fitness: Vec<f64>,
}

fn ablation_row(label: String, resolved: &Resolved, records: &[RunRecord]) -> AblationRow {
    let fitness: Vec<f64> = records.iter().map(|r| r.result.best.fitness).collect();
    let acc: Vec<f64> = records.iter().filter_map(|r| r.test_accuracy).collect();
    let (fitness_mean, fitness_std) = mean_std(&fitness);
    let (accuracy_mean, accuracy_std) = if acc.is_empty() { (None, None) } else { let (m, s) = mean_std(&acc); (Some(m), Some(s)) };
    AblationRow {
        config: label,
        population: resolved.search.population,
        sample: resolved.search.sample,
        runs: records.len(),
        fitness_mean,
        fitness_std,
        accuracy_mean,
        accuracy_std,
        fitness,
    }
}

/// Leave-one-out fitness ablation: the full fitness and each term removed.
pub fn ablate_fitness(base: &Resolved, bench: Option<&TabularBenchmark>) -> crate::Result<Vec<AblationRow>> {
    Terms::ablations()
        .into_iter()
        .map(|(label, terms)| {
            let r = Resolved { search: SearchConfig { terms, ..base.search.clone() }, ..base.clone() };
            Ok(ablation_row(label.to_string(), &r, &run_searches(&r, bench)?))
        })
        .collect()
}

/// Population/sample sweep over [`NN_PAIRS`].
pub fn ablate_nn(base: &Resolved, bench: Option<&TabularBenchmark>) -> crate::Result<Vec<AblationRow>> {
    NN_PAIRS
        .iter()
        .map(|&(population, sample)| {
            let r = Resolved { search: SearchConfig { population, sample, ..base.search.clone() }, ..base.clone() };
            Ok(ablation_row(format!("{population},{sample}"), &r, &run_searches(&r, bench)?))
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "population", "sample", "runs", "fitness_mean", "fitness_std", "accuracy_mean", "accuracy_std"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.config.clone(),
            r.population.to_string(),
            r.sample.to_string(),
            r.runs.to_string(),
            format!("{:.10}", r.fitness_mean),
            format!("{:.10}", r.fitness_std),
            opt(r.accuracy_mean),
            opt(r.accuracy_std),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
}

fn cmd_ablate(args: &AblateArgs, argv: &[String], out: &mut dyn std::io::Write) -> CliResult<()> {
    let started = unix_now();
    let resolved = resolve(&args.common, &args.flags)?;
    let bench = load_tabular(&resolved.tabular)?;
    let mut rows = Vec::new();
    if matches!(args.mode, AblateMode::Fitness | AblateMode::Both) {
        rows.extend(ablate_fitness(&resolved, bench.as_ref())?);
    }
    if matches!(args.mode, AblateMode::Nn | AblateMode::Both) {
        rows.extend(ablate_nn(&resolved, bench.as_ref())?);
    }
    let table = ablation_csv(&rows)?;
    if let Some(dir) = prepare_out(&args.flags.out)? {
        let mut outputs = Vec::new();
        write_file(&dir.join("ablation.csv"), table.as_bytes(), &mut outputs)?;
        write_manifest(&dir, argv, &resolved, started, outputs)?;
    }
    write!(out, "{table}")?;
    Ok(())
}

/// Parses `argv` and runs the command, writing results to `out` and
/// diagnostics to stderr. Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Search(a) => cmd_search(a, &argv, out),
        Command::Score(a) => cmd_score(a, out),
        Command::Correlate(a) => cmd_correlate(a, out),
        Command::Ablate(a) => cmd_ablate(a, &argv, out),
        Command::Cost(a) => cmd_cost(a, out),
        Command::Enumerate(a) => cmd_enumerate(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("freerea: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_parsing() {
        assert_eq!(parse_constraints("4e7,3e5").unwrap(), ConstraintSpec::new(40_000_000, 300_000));
        assert_eq!(parse_constraints("inf, 10").unwrap(), ConstraintSpec { max_flops: None, max_params: Some(10) });
        assert!(parse_constraints("4e7").is_err());
        assert!(parse_constraints("0,1").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\npopulation = 30\nsample = 6\nmax-iters = 7\n").unwrap();
        let common = CommonArgs { config: Some(path), seed: Some(9), ..Default::default() };
        let flags = SearchFlags { sample: Some(10), ..Default::default() };
        let r = resolve(&common, &flags).unwrap();
        assert_eq!(r.search.seed, 9);
        assert_eq!(r.search.population, 30);
        assert_eq!(r.search.sample, 10);
        assert_eq!(r.search.max_iterations, Some(7));
        assert_eq!(r.search.time_budget_secs, None);
    }

    #[test]
    fn missing_budget_defaults_to_time() {
        let r = resolve(&CommonArgs { seed: Some(1), ..Default::default() }, &SearchFlags::default()).unwrap();
        assert_eq!(r.search.time_budget_secs, Some(DEFAULT_TIME_BUDGET));
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let flags = SearchFlags { max_iters: Some(5), constraints: Some("4e7,inf".into()), no_lr: true, ..Default::default() };
        let r = resolve(&CommonArgs { seed: Some(4), ..Default::default() }, &flags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, toml::to_string(&r.to_file_config()).unwrap()).unwrap();
        let again = resolve(&CommonArgs { config: Some(path), ..Default::default() }, &SearchFlags::default()).unwrap();
        assert_eq!(again.search, r.search);
    }

    #[test]
    fn mean_std_sample_convention() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
