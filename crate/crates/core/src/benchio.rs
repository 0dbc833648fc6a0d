//! Tabular benchmarks (genotype → accuracy), rank correlations and
//! exhaustive oracles.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{ConstraintSpec, Objective, Score};
use crate::metrics::{evaluate, BatchSource};
use crate::netbuilder::{cost, CostReport, MacroSkeleton};
use crate::searchspace::{enumerate_space, random_genotype, Family, Genotype, SpaceDescriptor, NATS_OPS};
use crate::seed::{derive, rng_from};

#[derive(Debug, Clone, PartialEq)]
pub struct TabRecord {
    pub genotype: Genotype,
    pub test_accuracy: f64,
    pub flops: Option<u64>,
    pub params: Option<u64>,
}

/// Accuracy table keyed by canonical hash. Read-only after loading.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularBenchmark {
    entries: BTreeMap<u64, TabRecord>,
}

fn parse_count(field: &str) -> std::result::Result<Option<u64>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    if let Ok(v) = field.parse::<u64>() {
        return Ok(Some(v));
    }
    match field.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(Some(v as u64)),
        _ => Err(format!("`{field}` is not a nonnegative integer count")),
    }
}

impl TabularBenchmark {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TabRecord> {
        self.entries.values()
    }

    pub fn get(&self, g: &Genotype) -> Option<&TabRecord> {
        self.entries.get(&g.canonical_hash())
    }

    pub fn accuracy(&self, g: &Genotype) -> Option<f64> {
        self.get(g).map(|r| r.test_accuracy)
    }

    /// Adds a record; returns `false` (and leaves the table unchanged) when
    /// the architecture is already present or the accuracy is out of range.
    pub fn insert(&mut self, record: TabRecord) -> bool {
        if !(0.0..=100.0).contains(&record.test_accuracy) {
            return false;
        }
        let key = record.genotype.canonical_hash();
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key, record);
        true
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, path)
    }

    /// Parses the `genotype,test_accuracy[,flops,params]` schema. `path` is
    /// only used in error messages.
    pub fn from_reader<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
        let fail = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < 2 || names[0] != "genotype" || names[1] != "test_accuracy" {
            return Err(fail(1, format!("expected header `genotype,test_accuracy[,flops,params]`, got `{}`", names.join(","))));
        }
        let mut bench = TabularBenchmark::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.len() < 2 || row.len() > 4 {
                return Err(fail(line, format!("expected 2 to 4 fields, found {}", row.len())));
            }
            let genotype: Genotype = row[0].parse().map_err(|e: Error| fail(line, e.to_string()))?;
            let test_accuracy: f64 =
                row[1].parse().map_err(|_| fail(line, format!("`{}` is not a number", &row[1])))?;
            if !(0.0..=100.0).contains(&test_accuracy) {
                return Err(fail(line, format!("accuracy {test_accuracy} outside [0, 100]")));
            }
            let flops = row.get(2).map(parse_count).transpose().map_err(|r| fail(line, r))?.flatten();
            let params = row.get(3).map(parse_count).transpose().map_err(|r| fail(line, r))?.flatten();
            let key = genotype.canonical_hash();
            if bench.entries.contains_key(&key) {
                return Err(Error::DuplicateGenotype { path: path.to_path_buf(), line, genotype: row[0].to_string() });
            }
            bench.entries.insert(key, TabRecord { genotype, test_accuracy, flops, params });
        }
        Ok(bench)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["genotype", "test_accuracy", "flops", "params"])?;
        for r in self.entries.values() {
            let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
            // `{:?}` keeps enough digits to round-trip exactly.
            w.write_record([r.genotype.to_string(), format!("{:?}", r.test_accuracy), opt(r.flops), opt(r.params)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl Objective for TabularBenchmark {
    fn evaluate(&self, g: &Genotype) -> Result<Score> {
        self.accuracy(g).map(Score::Direct).ok_or_else(|| Error::MissingGenotype(vec![g.to_string()]))
    }

    fn cost(&self, g: &Genotype) -> Option<CostReport> {
        let r = self.get(g)?;
        Some(CostReport { flops: r.flops?, params: r.params? })
    }
}

/// Highest-accuracy entry satisfying `c`; ties go to the smallest genotype
/// string.
pub fn exhaustive_best<'a>(bench: &'a TabularBenchmark, c: Option<&ConstraintSpec>) -> Result<&'a TabRecord> {
    let mut best: Option<(&TabRecord, String)> = None;
    for r in bench.records() {
        if let Some(c) = c {
            let missing = |what: &str| Error::InvalidConfig(format!("constraint given but `{}` has no {what}", r.genotype));
            let flops = r.flops.ok_or_else(|| missing("flops"))?;
            let params = r.params.ok_or_else(|| missing("params"))?;
            if !c.admits(&CostReport { flops, params }) {
                continue;
            }
        }
        let name = r.genotype.to_string();
        let better = match &best {
            None => true,
            Some((b, bname)) => r.test_accuracy > b.test_accuracy || (r.test_accuracy == b.test_accuracy && name < *bname),
        };
        if better {
            best = Some((r, name));
        }
    }
    best.map(|(r, _)| r).ok_or(Error::NoFeasibleEntry)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("fewer than two observations"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("NaN in input"));
    }
    Ok(())
}

/// Σ t(t−1)/2 over runs of equal values in an already sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Merge sort by `total_cmp`, returning the number of inversions removed.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]) + sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]).is_lt() {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b in O(n log n).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<u64> = pairs.iter().map(|p| p.0.to_bits()).collect();
    let joint: Vec<(u64, u64)> = pairs.iter().map(|p| (p.0.to_bits(), p.1.to_bits())).collect();
    let n0 = n * (n - 1) / 2;
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&joint);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let ybits: Vec<u64> = ys.iter().map(|v| v.to_bits()).collect();
    let n2 = tied_pairs(&ybits);
    if n0 == n1 || n0 == n2 {
        return Err(Error::DegenerateInput("constant vector"));
    }
    let s = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Ok(s / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]].total_cmp(&v[order[i]]).is_eq() {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub kendall: Option<f64>,
    pub spearman: Option<f64>,
    /// `ok`, or the error that prevented the correlation.
    pub status: String,
}

/// Correlates each named score column with `accuracy`.
pub fn correlate_columns(columns: &[(&str, Vec<f64>)], accuracy: &[f64]) -> Vec<CorrelationRow> {
    columns
        .iter()
        .map(|(name, xs)| match kendall_tau(xs, accuracy).and_then(|k| Ok((k, spearman_rho(xs, accuracy)?))) {
            Ok((k, s)) => CorrelationRow { metric: name.to_string(), kendall: Some(k), spearman: Some(s), status: "ok".into() },
            Err(e) => CorrelationRow { metric: name.to_string(), kendall: None, spearman: None, status: e.to_string() },
        })
        .collect()
}

pub fn write_correlation_csv<W: Write>(rows: &[CorrelationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "kendall", "spearman", "status"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([r.metric.clone(), fmt(r.kendall), fmt(r.spearman), r.status.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Genotypes to correlate: the whole NATS space when `sample_size` is
/// `None`, otherwise a seeded sample of distinct architectures.
pub fn correlation_sample(family: Family, sample_size: Option<usize>, seed: u64) -> Result<Vec<Genotype>> {
    let space = SpaceDescriptor::of(family);
    let mut rng = rng_from(seed);
    match (family, sample_size) {
        (Family::Nats, None) => Ok(enumerate_space(&space)?.collect()),
        (Family::Nats, Some(k)) => {
            let all: Vec<Genotype> = enumerate_space(&space)?.collect();
            let k = k.min(all.len());
            Ok(sample(&mut rng, all.len(), k).into_iter().map(|i| all[i].clone()).collect())
        }
        (Family::Nb101, None) => Err(Error::UnsupportedSpace("nb101")),
        (Family::Nb101, Some(k)) => {
            let mut seen = std::collections::HashSet::new();
            let mut out = Vec::new();
            let mut attempts = 0;
            while out.len() < k && attempts < 1000 * k.max(1) {
                attempts += 1;
                let g = random_genotype(&space, &mut rng)?;
                if seen.insert(g.canonical_hash()) {
                    out.push(g);
                }
            }
            Ok(out)
        }
    }
}

/// Scores every sampled genotype (averaged over `repeats` initializations)
/// and correlates LogSynflow, Synflow, linear regions and the skip score
/// with the tabular accuracy.
pub fn correlation_report(
    genotypes: &[Genotype],
    sk: &MacroSkeleton,
    bench: &TabularBenchmark,
    repeats: usize,
    seed: u64,
) -> Result<Vec<CorrelationRow>> {
    let missing: Vec<String> =
        genotypes.iter().filter(|g| bench.get(g).is_none()).map(|g| format!("{g} ({:016x})", g.canonical_hash())).collect();
    if !missing.is_empty() {
        return Err(Error::MissingGenotype(missing));
    }
    let batches = BatchSource::Fixed(crate::metrics::synthetic_batch(sk, derive(seed, u64::MAX)));
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut acc = Vec::with_capacity(genotypes.len());
    for g in genotypes {
        let e = evaluate(g, sk, repeats, derive(seed, g.canonical_hash()), &batches)?;
        cols[0].push(e.mean.log_synflow);
        cols[1].push(e.mean_synflow);
        cols[2].push(e.mean.linear_regions);
        cols[3].push(e.mean.skip_score);
        acc.push(bench.accuracy(g).expect("checked above"));
    }
    let [ls, sf, lr, skip] = cols;
    Ok(correlate_columns(&[("log_synflow", ls), ("synflow", sf), ("linear_regions", lr), ("skip_score", skip)], &acc))
}

/// Generates a full NATS accuracy table with a planted smooth structure:
/// per-edge operator effects plus weak pairwise interactions and a little
/// noise. Costs are filled in from `sk` when given.
pub fn synthetic_nats_table(seed: u64, sk: Option<&MacroSkeleton>) -> Result<TabularBenchmark> {
    let mut rng = rng_from(seed);
    // Rough NATS-like operator quality: conv3x3 > conv1x1 > skip > pool > zero.
    let base = [3.0, 1.8, -0.5, 0.6, -2.0];
    let mut effect = [[0.0; 5]; 6];
    for e in effect.iter_mut() {
        for (k, v) in e.iter_mut().enumerate() {
            *v = base[k] + rng.random_range(-0.8..0.8);
        }
    }
    let mut pair = [[[0.0; 5]; 6]; 6];
    for row in pair.iter_mut() {
        for cell in row.iter_mut() {
            for v in cell.iter_mut() {
                *v = rng.random_range(-0.15..0.15);
            }
        }
    }
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let space = SpaceDescriptor::nats();
    let mut bench = TabularBenchmark::new();
    for g in enumerate_space(&space)? {
        let Genotype::Nats(ops) = &g else { unreachable!() };
        let idx: Vec<usize> = ops.iter().map(|o| NATS_OPS.iter().position(|p| p == o).expect("NATS op")).collect();
        let mut acc = 70.0;
        for e in 0..6 {
            acc += effect[e][idx[e]];
            for f in e + 1..6 {
                acc += pair[e][f][idx[e]] * (idx[f] as f64 - 2.0) / 2.0;
            }
        }
        acc = (acc + noise.sample(&mut rng)).clamp(0.0, 100.0);
        let (flops, params) = match sk {
            Some(sk) => {
                let c = cost(&g, sk)?;
                (Some(c.flops), Some(c.params))
            }
            None => (None, None),
        };
        bench.insert(TabRecord { genotype: g, test_accuracy: acc, flops, params });
    }
    Ok(bench)
}

/// Path used in error messages for in-memory tables.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TabularBenchmark> {
        TabularBenchmark::from_reader(text.as_bytes(), &memory_path())
    }

    #[test]
    fn loads_well_formed_rows() {
        let b = parse(
            "genotype,test_accuracy,flops,params\n\
             nats:conv3x3|conv3x3|conv3x3|conv3x3|conv3x3|conv3x3,93.5,1000,20\n\
             nats:zero|zero|zero|zero|zero|zero,10,5,1\n\
             nats:skip|zero|zero|zero|zero|zero,11.25,,\n",
        )
        .unwrap();
        assert_eq!(b.len(), 3);
        let g: Genotype = "nats:skip|zero|zero|zero|zero|zero".parse().unwrap();
        assert_eq!(b.get(&g).unwrap().flops, None);
        assert_eq!(b.accuracy(&g), Some(11.25));
    }

    #[test]
    fn out_of_range_accuracy_reports_line() {
        let err = parse("genotype,test_accuracy\nnats:zero|zero|zero|zero|zero|zero,50\nnats:skip|zero|zero|zero|zero|zero,101.0\n")
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let err = parse("genotype,test_accuracy\nnats:zero|zero|zero|zero|zero|zero,50\nnats:zero|zero|zero|zero|zero|zero,51\n")
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateGenotype { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_header_and_bad_genotype() {
        assert!(matches!(parse("arch,acc\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("genotype,test_accuracy\nnats:bogus,1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn export_round_trip() {
        let b = synthetic_nats_table(3, None).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert_eq!(TabularBenchmark::from_reader(buf.as_slice(), &memory_path()).unwrap(), b);
    }

    #[test]
    fn kendall_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((kendall_tau(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(kendall_tau(&x, &[1.0; 4]), Err(Error::DegenerateInput(_))));
        assert!(matches!(kendall_tau(&x, &[1.0; 3]), Err(Error::LengthMismatch(4, 3))));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        let x = [0.3, -1.0, 7.0, 2.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp() * 3.0).collect();
        assert!((spearman_rho(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn exhaustive_best_tie_break_and_constraints() {
        let b = parse(
            "genotype,test_accuracy,flops,params\n\
             nats:skip|zero|zero|zero|zero|zero,90,10,10\n\
             nats:conv1x1|zero|zero|zero|zero|zero,90,100,100\n\
             nats:zero|zero|zero|zero|zero|zero,50,1,1\n",
        )
        .unwrap();
        assert_eq!(exhaustive_best(&b, None).unwrap().genotype.to_string(), "nats:conv1x1|zero|zero|zero|zero|zero");
        let c = ConstraintSpec::new(50, 50);
        assert_eq!(exhaustive_best(&b, Some(&c)).unwrap().test_accuracy, 90.0);
        assert!(matches!(exhaustive_best(&b, Some(&ConstraintSpec::new(0, 0))), Err(Error::NoFeasibleEntry)));
    }

    #[test]
    fn synthetic_table_covers_the_space() {
        let b = synthetic_nats_table(1, None).unwrap();
        assert_eq!(b.len(), 15_625);
        assert!(b.records().all(|r| (0.0..=100.0).contains(&r.test_accuracy)));
    }

    #[test]
    fn self_correlation_and_constant_accuracy() {
        let xs = vec![0.5, 3.0, 2.0, 9.0];
        let rows = correlate_columns(&[("log_synflow", xs.clone())], &xs);
        assert_eq!(rows[0].kendall, Some(1.0));
        assert_eq!(rows[0].spearman, Some(1.0));
        let rows = correlate_columns(&[("log_synflow", xs)], &[70.0; 4]);
        assert_eq!(rows[0].kendall, None);
        assert!(rows[0].status.contains("degenerate"));
    }
}
