//! Training-free proxy scores: LogSynflow (and plain Synflow for
//! comparison), the Hamming-kernel linear-region score, and the
//! skipped-layers ratio.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::RwLock;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Network, PackedMask, Tensor};
use crate::error::{Error, Result};
use crate::netbuilder::{build_network, MacroSkeleton};
use crate::searchspace::{Genotype, Op, NATS_EDGES, NATS_NODES};
use crate::seed::{derive, rng_from};

pub const LR_BATCH: usize = 64;
pub const DEFAULT_REPEATS: usize = 3;

/// Raw proxy scores of one architecture. `linear_regions` is `-inf` when
/// the activation kernel is singular.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub log_synflow: f64,
    #[serde(with = "neg_inf_as_null")]
    pub linear_regions: f64,
    pub skip_score: f64,
}

/// JSON has no infinities; the singular-kernel sentinel travels as `null`.
pub(crate) mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Both Synflow variants from a single backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynflowScores {
    pub synflow: f64,
    pub log_synflow: f64,
}

/// Replaces every parameter by its absolute value, forwards an all-ones
/// sample with batch norm suppressed and backpropagates the output sum.
/// Modifies `net` in place.
pub fn synflow_scores(net: &mut Network) -> Result<SynflowScores> {
    for p in net.params_mut() {
        p.data_mut().iter_mut().for_each(|w| *w = w.abs());
    }
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let out = net.forward(&Tensor::filled(&shape, 1.0), BnMode::Suppressed)?;
    net.zero_grad();
    net.backward(&Tensor::filled(out.shape(), 1.0))?;
    let mut scores = SynflowScores { synflow: 0.0, log_synflow: 0.0 };
    for p in net.params() {
        let Some(grad) = p.grad() else { continue };
        for (&w, &g) in p.data().iter().zip(grad) {
            // Gradients are nonnegative up to rounding.
            let g = g.max(0.0);
            scores.synflow += w * g;
            scores.log_synflow += w * g.ln_1p();
        }
    }
    if !scores.synflow.is_finite() {
        log::warn!("synflow overflowed to {}", scores.synflow);
    }
    Ok(scores)
}

pub fn log_synflow(g: &Genotype, sk: &MacroSkeleton, rng: &mut crate::seed::Rng) -> Result<f64> {
    let mut net = build_network(g, sk, rng)?;
    Ok(synflow_scores(&mut net)?.log_synflow)
}

pub fn synflow(g: &Genotype, sk: &MacroSkeleton, rng: &mut crate::seed::Rng) -> Result<f64> {
    let mut net = build_network(g, sk, rng)?;
    Ok(synflow_scores(&mut net)?.synflow)
}

/// `K[i][j] = N_A − hamming(c_i, c_j)` over the concatenated activation
/// patterns. Returns the row-major kernel and `N_A`.
pub fn hamming_kernel(masks: &[PackedMask]) -> (Vec<f64>, usize) {
    let samples = masks.first().map_or(0, |m| m.samples);
    let units: usize = masks.iter().map(|m| m.units).sum();
    let mut kernel = vec![0.0; samples * samples];
    for i in 0..samples {
        kernel[i * samples + i] = units as f64;
        for j in i + 1..samples {
            let distance: u32 = masks
                .iter()
                .map(|m| m.sample(i).iter().zip(m.sample(j)).map(|(a, b)| (a ^ b).count_ones()).sum::<u32>())
                .sum();
            let k = (units - distance as usize) as f64;
            kernel[i * samples + j] = k;
            kernel[j * samples + i] = k;
        }
    }
    (kernel, units)
}

/// `ln |det A|` by LU with partial pivoting; `-inf` for singular input.
pub fn log_abs_det(matrix: &[f64], n: usize) -> f64 {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return f64::NEG_INFINITY;
    }
    let threshold = 16.0 * n as f64 * f64::EPSILON * scale;
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .expect("non-empty range");
        let pivot = a[pivot_row * n + col];
        if pivot.abs() <= threshold {
            return f64::NEG_INFINITY;
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
        }
        log_det += pivot.abs().ln();
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor != 0.0 {
                for k in col..n {
                    a[r * n + k] -= factor * a[col * n + k];
                }
            }
        }
    }
    log_det
}

/// Linear-region score of an already built network on `batch`.
pub fn linear_regions_of(net: &Network, batch: &Tensor) -> Result<f64> {
    let expected = net.input_shape();
    if batch.shape().len() != expected.len() + 1 || &batch.shape()[1..] != expected || batch.shape()[0] < 2 {
        let mut want = vec![LR_BATCH];
        want.extend_from_slice(expected);
        return Err(Error::BatchShapeMismatch { expected: want, got: batch.shape().to_vec() });
    }
    let out = net.forward_masks(batch, BnMode::Standard)?;
    let (kernel, _) = hamming_kernel(&out.masks);
    Ok(log_abs_det(&kernel, batch.shape()[0]))
}

pub fn linear_regions(g: &Genotype, sk: &MacroSkeleton, batch: &Tensor, rng: &mut crate::seed::Rng) -> Result<f64> {
    let net = build_network(g, sk, rng)?;
    linear_regions_of(&net, batch)
}

/// Layers bypassed per skip connection, averaged over the skip edges.
///
/// For a skip edge `(i, j)` the bypassed count is the largest number of
/// layer edges (convolutions and poolings) on any other `i → j` path that
/// avoids zero edges. NB101 cells have no skip operator and score 0.
pub fn skip_score(g: &Genotype) -> f64 {
    let Genotype::Nats(ops) = g else { return 0.0 };
    let mut total = 0usize;
    let mut skips = 0usize;
    for (e, &(from, to)) in NATS_EDGES.iter().enumerate() {
        if ops[e] != Op::Skip {
            continue;
        }
        skips += 1;
        // Longest path DP over nodes in topological order.
        let mut best: [Option<usize>; NATS_NODES] = [None; NATS_NODES];
        best[from] = Some(0);
        for v in from + 1..=to {
            for (f, &(a, b)) in NATS_EDGES.iter().enumerate() {
                if b != v || f == e || ops[f] == Op::Zero {
                    continue;
                }
                if let Some(len) = best[a] {
                    let cand = len + usize::from(ops[f].is_layer());
                    best[v] = Some(best[v].map_or(cand, |cur| cur.max(cand)));
                }
            }
        }
        total += best[to].unwrap_or(0);
    }
    if skips == 0 {
        0.0
    } else {
        total as f64 / skips as f64
    }
}

/// Seeded standard-normal batch of `LR_BATCH` samples.
pub fn synthetic_batch(sk: &MacroSkeleton, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let mut shape = vec![LR_BATCH];
    shape.extend_from_slice(&sk.input_shape());
    let len = shape.iter().product();
    let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(&shape, data).expect("length matches shape")
}

const BATCH_MAGIC: &[u8; 4] = b"FRB1";

/// Writes a batch as a 16-byte header (magic `FRB1`, `N: u32`, `C, H, W: u16`,
/// two reserved zero bytes) followed by little-endian `f64` values.
pub fn write_batch_file(path: &Path, batch: &Tensor) -> Result<()> {
    let [n, c, h, w] = batch.shape() else {
        return Err(Error::BatchFile(format!("expected a 4-d batch, got {:?}", batch.shape())));
    };
    let narrow = |v: usize| u16::try_from(v).map_err(|_| Error::BatchFile(format!("dimension {v} exceeds u16")));
    let mut bytes = Vec::with_capacity(16 + 8 * batch.len());
    bytes.extend_from_slice(BATCH_MAGIC);
    bytes.extend_from_slice(&u32::try_from(*n).map_err(|_| Error::BatchFile("batch too large".into()))?.to_le_bytes());
    for v in [c, h, w] {
        bytes.extend_from_slice(&narrow(*v)?.to_le_bytes());
    }
    bytes.extend_from_slice(&[0, 0]);
    for v in batch.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_batch_file(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != BATCH_MAGIC {
        return Err(Error::BatchFile(format!("{} lacks the FRB1 header", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = |at: usize| u16::from_le_bytes(bytes[at..at + 2].try_into().expect("2 bytes")) as usize;
    let shape = [n, dim(8), dim(10), dim(12)];
    let len: usize = shape.iter().product();
    if bytes.len() != 16 + 8 * len {
        return Err(Error::BatchFile(format!("expected {} data bytes, found {}", 8 * len, bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::from_vec(&shape, data)
}

/// Where linear-region batches come from.
#[derive(Debug, Clone)]
pub enum BatchSource {
    /// One batch shared by every repeat and every architecture.
    Fixed(Tensor),
    /// A fresh synthetic batch per repeat, derived from the repeat seed.
    PerRepeat,
}

/// Scores from one initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatScores {
    pub log_synflow: f64,
    pub synflow: f64,
    #[serde(with = "neg_inf_as_null")]
    pub linear_regions: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub repeats: Vec<RepeatScores>,
    pub mean: MetricVector,
    pub mean_synflow: f64,
}

/// Scores one initialization drawn from `seed`: linear regions on the
/// freshly initialized network, then both Synflow variants.
pub fn score_once(g: &Genotype, sk: &MacroSkeleton, seed: u64, batches: &BatchSource) -> Result<RepeatScores> {
    let mut rng = rng_from(seed);
    let mut net = build_network(g, sk, &mut rng)?;
    let linear_regions = match batches {
        BatchSource::Fixed(batch) => linear_regions_of(&net, batch)?,
        BatchSource::PerRepeat => linear_regions_of(&net, &synthetic_batch(sk, derive(seed, 1)))?,
    };
    let syn = synflow_scores(&mut net)?;
    Ok(RepeatScores { log_synflow: syn.log_synflow, synflow: syn.synflow, linear_regions })
}

/// Seed of the `k`-th repeat under `base`.
pub fn repeat_seed(base: u64, k: usize) -> u64 {
    derive(base, k as u64)
}

pub fn evaluate(g: &Genotype, sk: &MacroSkeleton, repeats: usize, base_seed: u64, batches: &BatchSource) -> Result<Evaluation> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".to_string()));
    }
    let runs = (0..repeats)
        .map(|k| score_once(g, sk, repeat_seed(base_seed, k), batches))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&RepeatScores) -> f64| runs.iter().map(f).sum::<f64>() / repeats as f64;
    Ok(Evaluation {
        mean: MetricVector {
            log_synflow: mean(|r| r.log_synflow),
            linear_regions: mean(|r| r.linear_regions),
            skip_score: skip_score(g),
        },
        mean_synflow: mean(|r| r.synflow),
        repeats: runs,
    })
}

/// Memoizing evaluator for one search run. Each architecture's seed is
/// derived from the run seed and its canonical hash, so results do not
/// depend on evaluation order.
#[derive(Debug)]
pub struct MetricEvaluator {
    pub skeleton: MacroSkeleton,
    pub repeats: usize,
    pub seed: u64,
    pub batches: BatchSource,
    memo: RwLock<HashMap<u64, MetricVector>>,
}

impl MetricEvaluator {
    /// Default batch policy: one synthetic batch fixed for the whole run.
    pub fn new(skeleton: MacroSkeleton, repeats: usize, seed: u64) -> Self {
        let batch = synthetic_batch(&skeleton, derive(seed, u64::MAX));
        Self::with_batches(skeleton, repeats, seed, BatchSource::Fixed(batch))
    }

    pub fn with_batches(skeleton: MacroSkeleton, repeats: usize, seed: u64, batches: BatchSource) -> Self {
        MetricEvaluator { skeleton, repeats, seed, batches, memo: RwLock::new(HashMap::new()) }
    }

    pub fn evaluate(&self, g: &Genotype) -> Result<MetricVector> {
        let key = g.canonical_hash();
        if let Some(v) = self.memo.read().expect("memo lock").get(&key) {
            return Ok(*v);
        }
        let v = evaluate(g, &self.skeleton, self.repeats, derive(self.seed, key), &self.batches)?.mean;
        self.memo.write().expect("memo lock").insert(key, v);
        Ok(v)
    }

    pub fn cached(&self) -> usize {
        self.memo.read().expect("memo lock").len()
    }
}
