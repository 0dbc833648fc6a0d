//! Cell-based genotype families: validity, sampling, variation operators,
//! canonical hashing and exhaustive enumeration.
//!
//! Two families are supported. `Nats` cells are four-node DAGs whose six
//! edges each carry an operator. `Nb101` cells are DAGs of up to seven nodes
//! where interior nodes carry operators and edges are plain connections.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Rejection-sampling cap shared by every stochastic operator in this module.
pub const RETRY_CAP: usize = 100;

pub const NATS_NODES: usize = 4;
pub const NATS_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
pub const NATS_SPACE_SIZE: usize = 15_625;

pub const NB101_MAX_NODES: usize = 7;
pub const NB101_MAX_EDGES: usize = 9;
const NB101_INTERIOR: usize = NB101_MAX_NODES - 2;
const NB101_PAIRS: usize = NB101_MAX_NODES * (NB101_MAX_NODES - 1) / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Nats,
    Nb101,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Nats => "nats",
            Family::Nb101 => "nb101",
        }
    }

    pub fn operators(self) -> &'static [Op] {
        match self {
            Family::Nats => &NATS_OPS,
            Family::Nb101 => &NB101_OPS,
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nats" => Ok(Family::Nats),
            "nb101" => Ok(Family::Nb101),
            other => Err(Error::InvalidConfig(format!("unknown search space `{other}`"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
    MaxPool3x3,
    Skip,
    Zero,
}

pub const NATS_OPS: [Op; 5] = [Op::Conv1x1, Op::Conv3x3, Op::AvgPool3x3, Op::Skip, Op::Zero];
pub const NB101_OPS: [Op; 3] = [Op::Conv1x1, Op::Conv3x3, Op::MaxPool3x3];

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Conv1x1 => "conv1x1",
            Op::Conv3x3 => "conv3x3",
            Op::AvgPool3x3 => "avgpool3x3",
            Op::MaxPool3x3 => "maxpool3x3",
            Op::Skip => "skip",
            Op::Zero => "zero",
        }
    }

    /// An operator that transforms its input with a parametric or pooling
    /// layer, as opposed to an identity or an absent connection.
    pub fn is_layer(self) -> bool {
        !matches!(self, Op::Skip | Op::Zero)
    }

    fn code(self) -> u8 {
        self as u8
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "conv1x1" => Op::Conv1x1,
            "conv3x3" => Op::Conv3x3,
            "avgpool3x3" => Op::AvgPool3x3,
            "maxpool3x3" => Op::MaxPool3x3,
            "skip" => Op::Skip,
            "zero" => Op::Zero,
            other => return Err(format!("unknown operator `{other}`")),
        })
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural description of a search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceDescriptor {
    pub family: Family,
    pub max_nodes: usize,
    pub max_edges: usize,
}

impl SpaceDescriptor {
    pub fn nats() -> Self {
        SpaceDescriptor { family: Family::Nats, max_nodes: NATS_NODES, max_edges: NATS_EDGES.len() }
    }

    pub fn nb101() -> Self {
        SpaceDescriptor { family: Family::Nb101, max_nodes: NB101_MAX_NODES, max_edges: NB101_MAX_EDGES }
    }

    pub fn of(family: Family) -> Self {
        match family {
            Family::Nats => Self::nats(),
            Family::Nb101 => Self::nb101(),
        }
    }

    pub fn operators(&self) -> &'static [Op] {
        self.family.operators()
    }

    /// Number of distinct genotypes, when the space is small enough to enumerate.
    pub fn size(&self) -> Option<usize> {
        match self.family {
            Family::Nats => Some(NATS_SPACE_SIZE),
            Family::Nb101 => None,
        }
    }
}

/// Node-labelled DAG cell. Node 0 is the input, the last node the output;
/// `ops[k]` labels interior node `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Nb101Cell {
    nodes: usize,
    adjacency: Vec<bool>,
    ops: Vec<Op>,
}

impl Nb101Cell {
    /// Builds a cell from a row-major `nodes × nodes` adjacency matrix.
    pub fn new(nodes: usize, adjacency: Vec<bool>, ops: Vec<Op>) -> Result<Self> {
        if !(2..=NB101_MAX_NODES).contains(&nodes) {
            return Err(Error::InvalidGenotype(format!("nb101 node count {nodes} outside [2, 7]")));
        }
        if adjacency.len() != nodes * nodes {
            return Err(Error::InvalidGenotype(format!(
                "adjacency has {} entries, expected {}",
                adjacency.len(),
                nodes * nodes
            )));
        }
        if ops.len() != nodes - 2 {
            return Err(Error::InvalidGenotype(format!(
                "{} interior ops given for {} interior nodes",
                ops.len(),
                nodes - 2
            )));
        }
        if let Some(op) = ops.iter().find(|op| !NB101_OPS.contains(op)) {
            return Err(Error::InvalidGenotype(format!("operator {op} not legal in nb101")));
        }
        for i in 0..nodes {
            for j in 0..=i {
                if adjacency[i * nodes + j] {
                    return Err(Error::InvalidGenotype(format!(
                        "adjacency entry ({i},{j}) is not strictly upper-triangular"
                    )));
                }
            }
        }
        let cell = Nb101Cell { nodes, adjacency, ops };
        let pruned = cell.pruned().ok_or_else(|| {
            Error::InvalidGenotype("output is not reachable from input".to_string())
        })?;
        if pruned.edge_count() > NB101_MAX_EDGES {
            return Err(Error::InvalidGenotype(format!(
                "{} edges exceed the limit of {NB101_MAX_EDGES}",
                pruned.edge_count()
            )));
        }
        Ok(cell)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.nodes + to]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&b| b).count()
    }

    /// Operator of node `node`; `None` for the input and output nodes.
    pub fn op_of(&self, node: usize) -> Option<Op> {
        if node == 0 || node + 1 == self.nodes {
            None
        } else {
            Some(self.ops[node - 1])
        }
    }

    /// Removes every node that is not on some input→output path.
    /// Returns `None` when the output is unreachable from the input.
    fn pruned(&self) -> Option<Nb101Cell> {
        let n = self.nodes;
        let mut from_input = vec![false; n];
        from_input[0] = true;
        for j in 1..n {
            from_input[j] = (0..j).any(|i| from_input[i] && self.has_edge(i, j));
        }
        let mut to_output = vec![false; n];
        to_output[n - 1] = true;
        for i in (0..n - 1).rev() {
            to_output[i] = (i + 1..n).any(|j| to_output[j] && self.has_edge(i, j));
        }
        if !from_input[n - 1] {
            return None;
        }
        let keep: Vec<usize> = (0..n).filter(|&v| from_input[v] && to_output[v]).collect();
        let m = keep.len();
        let mut adjacency = vec![false; m * m];
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                adjacency[a * m + b] = self.has_edge(i, j);
            }
        }
        let ops = keep[1..m - 1].iter().map(|&v| self.ops[v - 1]).collect();
        Some(Nb101Cell { nodes: m, adjacency, ops })
    }

    fn to_padded(&self) -> Padded {
        let n = self.nodes;
        let remap = |v: usize| if v + 1 == n { NB101_MAX_NODES - 1 } else { v };
        let mut padded = Padded { adjacency: [false; NB101_PAIRS], ops: [Op::Conv3x3; NB101_INTERIOR] };
        for i in 0..n {
            for j in i + 1..n {
                if self.has_edge(i, j) {
                    padded.set(remap(i), remap(j), true);
                }
            }
        }
        padded.ops[..n - 2].copy_from_slice(&self.ops);
        padded
    }
}

/// Fixed seven-node alignment used by NB101 mutation and crossover.
/// Genes are the 21 upper-triangular adjacency bits plus 5 interior ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Padded {
    adjacency: [bool; NB101_PAIRS],
    ops: [Op; NB101_INTERIOR],
}

impl Padded {
    fn pair_index(i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < NB101_MAX_NODES);
        // Row-major enumeration of pairs (i, j), i < j.
        i * (2 * NB101_MAX_NODES - i - 1) / 2 + (j - i - 1)
    }

    fn set(&mut self, i: usize, j: usize, value: bool) {
        self.adjacency[Self::pair_index(i, j)] = value;
    }

    fn get(&self, i: usize, j: usize) -> bool {
        self.adjacency[Self::pair_index(i, j)]
    }

    /// Canonical cell, or `None` if the result violates the structural bounds.
    fn to_cell(self) -> Option<Nb101Cell> {
        let n = NB101_MAX_NODES;
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            for j in i + 1..n {
                adjacency[i * n + j] = self.get(i, j);
            }
        }
        let raw = Nb101Cell { nodes: n, adjacency, ops: self.ops.to_vec() };
        let pruned = raw.pruned()?;
        (pruned.edge_count() <= NB101_MAX_EDGES).then_some(pruned)
    }

    fn random(rng: &mut Rng) -> Padded {
        let mut padded = Padded { adjacency: [false; NB101_PAIRS], ops: [Op::Conv3x3; NB101_INTERIOR] };
        for bit in padded.adjacency.iter_mut() {
            *bit = rng.random_bool(0.5);
        }
        for op in padded.ops.iter_mut() {
            *op = NB101_OPS[rng.random_range(0..NB101_OPS.len())];
        }
        padded
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Genotype {
    /// Operators on the six edges, ordered as [`NATS_EDGES`].
    Nats([Op; 6]),
    Nb101(Nb101Cell),
}

impl Genotype {
    pub fn nats(ops: [Op; 6]) -> Result<Self> {
        if let Some(op) = ops.iter().find(|op| !NATS_OPS.contains(op)) {
            return Err(Error::InvalidGenotype(format!("operator {op} not legal in nats")));
        }
        Ok(Genotype::Nats(ops))
    }

    pub fn family(&self) -> Family {
        match self {
            Genotype::Nats(_) => Family::Nats,
            Genotype::Nb101(_) => Family::Nb101,
        }
    }

    /// Equivalent genotype with dead NB101 nodes removed. NATS genotypes
    /// are already canonical.
    pub fn canonical(&self) -> Genotype {
        match self {
            Genotype::Nats(_) => self.clone(),
            Genotype::Nb101(cell) => {
                Genotype::Nb101(cell.pruned().expect("validated cells always reach the output"))
            }
        }
    }

    /// Stable 64-bit FNV-1a digest of the canonical form.
    pub fn canonical_hash(&self) -> u64 {
        let mut hasher = Fnv64::new();
        match self.canonical() {
            Genotype::Nats(ops) => {
                hasher.write(&[0]);
                for op in ops {
                    hasher.write(&[op.code()]);
                }
            }
            Genotype::Nb101(cell) => {
                hasher.write(&[1, cell.nodes as u8]);
                for &bit in &cell.adjacency {
                    hasher.write(&[bit as u8]);
                }
                for op in &cell.ops {
                    hasher.write(&[op.code()]);
                }
            }
        }
        hasher.finish()
    }

    pub fn count_op(&self, op: Op) -> usize {
        match self {
            Genotype::Nats(ops) => ops.iter().filter(|&&o| o == op).count(),
            Genotype::Nb101(cell) => cell.ops.iter().filter(|&&o| o == op).count(),
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Genotype::Nats(ops) => {
                let names: Vec<&str> = ops.iter().map(|op| op.name()).collect();
                write!(f, "nats:{}", names.join("|"))
            }
            Genotype::Nb101(cell) => {
                let bits: String =
                    cell.adjacency.iter().map(|&b| if b { '1' } else { '0' }).collect();
                let names: Vec<&str> = cell.ops.iter().map(|op| op.name()).collect();
                write!(f, "nb101:{}:{}", bits, names.join(","))
            }
        }
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let fail = |reason: String| Error::GenotypeParse { text: text.to_string(), reason };
        let text_trim = text.trim();
        if let Some(body) = text_trim.strip_prefix("nats:") {
            let body = body.trim();
            let body = body
                .strip_prefix('(')
                .and_then(|b| b.strip_suffix(')'))
                .unwrap_or(body);
            let parsed: Vec<Op> =
                body.split('|').map(Op::from_str).collect::<std::result::Result<_, _>>().map_err(fail)?;
            let ops: [Op; 6] = parsed
                .try_into()
                .map_err(|v: Vec<Op>| fail(format!("expected 6 operators, found {}", v.len())))?;
            Genotype::nats(ops)
        } else if let Some(body) = text_trim.strip_prefix("nb101:") {
            let (bits, ops) =
                body.split_once(':').ok_or_else(|| fail("missing `:<ops>` section".to_string()))?;
            let nodes = (bits.len() as f64).sqrt().round() as usize;
            if nodes * nodes != bits.len() {
                return Err(fail(format!("adjacency length {} is not a square", bits.len())));
            }
            let adjacency = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(fail(format!("bad adjacency character `{other}`"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            let ops: Vec<Op> = if ops.trim().is_empty() {
                Vec::new()
            } else {
                ops.split(',').map(Op::from_str).collect::<std::result::Result<_, _>>().map_err(fail)?
            };
            Ok(Genotype::Nb101(Nb101Cell::new(nodes, adjacency, ops)?))
        } else {
            Err(fail("expected `nats:` or `nb101:` prefix".to_string()))
        }
    }
}

impl Serialize for Genotype {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

pub fn random_genotype(space: &SpaceDescriptor, rng: &mut Rng) -> Result<Genotype> {
    match space.family {
        Family::Nats => {
            let mut ops = [Op::Zero; 6];
            for op in ops.iter_mut() {
                *op = NATS_OPS[rng.random_range(0..NATS_OPS.len())];
            }
            Ok(Genotype::Nats(ops))
        }
        Family::Nb101 => {
            for _ in 0..RETRY_CAP {
                if let Some(cell) = Padded::random(rng).to_cell() {
                    return Ok(Genotype::Nb101(cell));
                }
            }
            Err(Error::ValidityExhausted(RETRY_CAP))
        }
    }
}

/// Returns a valid child that differs from `parent`.
pub fn mutate(parent: &Genotype, rng: &mut Rng) -> Result<Genotype> {
    match parent {
        Genotype::Nats(ops) => {
            let mut child = *ops;
            let edge = rng.random_range(0..child.len());
            let current = child[edge];
            let alternatives: Vec<Op> = NATS_OPS.iter().copied().filter(|&op| op != current).collect();
            child[edge] = alternatives[rng.random_range(0..alternatives.len())];
            Ok(Genotype::Nats(child))
        }
        Genotype::Nb101(cell) => {
            let canonical = cell.pruned().expect("validated cells always reach the output");
            // Edits that only touch dead nodes are kept as neutral drift so
            // that cells without a distinct single-edit neighbour (e.g. a bare
            // input→output edge) can still move.
            let mut candidate = canonical.to_padded();
            for _ in 0..RETRY_CAP {
                let mut next = candidate;
                if rng.random_bool(0.5) {
                    let bit = rng.random_range(0..NB101_PAIRS);
                    next.adjacency[bit] = !next.adjacency[bit];
                } else {
                    let slot = rng.random_range(0..NB101_INTERIOR);
                    let current = next.ops[slot];
                    let alternatives: Vec<Op> =
                        NB101_OPS.iter().copied().filter(|&op| op != current).collect();
                    next.ops[slot] = alternatives[rng.random_range(0..alternatives.len())];
                }
                match next.to_cell() {
                    Some(child) if child != canonical => return Ok(Genotype::Nb101(child)),
                    Some(_) => candidate = next,
                    None => {}
                }
            }
            Err(Error::ValidityExhausted(RETRY_CAP))
        }
    }
}

/// Uniform crossover: every gene is taken from either parent with
/// probability one half.
pub fn crossover(a: &Genotype, b: &Genotype, rng: &mut Rng) -> Result<Genotype> {
    match (a, b) {
        (Genotype::Nats(left), Genotype::Nats(right)) => {
            let mut child = *left;
            for (gene, &other) in child.iter_mut().zip(right) {
                if rng.random_bool(0.5) {
                    *gene = other;
                }
            }
            Ok(Genotype::Nats(child))
        }
        (Genotype::Nb101(left), Genotype::Nb101(right)) => {
            let left = left.pruned().expect("validated").to_padded();
            let right = right.pruned().expect("validated").to_padded();
            for _ in 0..RETRY_CAP {
                let mut child = left;
                for (bit, &other) in child.adjacency.iter_mut().zip(&right.adjacency) {
                    if rng.random_bool(0.5) {
                        *bit = other;
                    }
                }
                for (op, &other) in child.ops.iter_mut().zip(&right.ops) {
                    if rng.random_bool(0.5) {
                        *op = other;
                    }
                }
                if let Some(cell) = child.to_cell() {
                    return Ok(Genotype::Nb101(cell));
                }
            }
            log::debug!("nb101 crossover exhausted its retry cap, falling back to mutation");
            mutate(a, rng)
        }
        _ => Err(Error::FamilyMismatch),
    }
}

/// Decodes the `index`-th NATS genotype in mixed-radix order.
pub fn nats_from_index(index: usize) -> Genotype {
    debug_assert!(index < NATS_SPACE_SIZE);
    let mut rest = index;
    let mut ops = [Op::Zero; 6];
    for op in ops.iter_mut().rev() {
        *op = NATS_OPS[rest % NATS_OPS.len()];
        rest /= NATS_OPS.len();
    }
    Genotype::Nats(ops)
}

pub fn enumerate_space(space: &SpaceDescriptor) -> Result<impl Iterator<Item = Genotype>> {
    match space.family {
        Family::Nats => Ok((0..NATS_SPACE_SIZE).map(nats_from_index)),
        Family::Nb101 => Err(Error::UnsupportedSpace("nb101")),
    }
}
