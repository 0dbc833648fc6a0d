//! Materializes genotypes into networks and counts their cost.
//!
//! A network is a conv3x3 stem, a sequence of stages each holding repeated
//! copies of the searched cell, stride-2 residual reduction blocks between
//! stages, and a batch-norm/ReLU/global-pool/linear head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{LayerKind, Network, NetworkBuilder, NodeId};
use crate::error::{Error, Result};
use crate::searchspace::{Genotype, Nb101Cell, Op, NATS_EDGES, NATS_NODES};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub cells: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroSkeleton {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// The stem projects to the first stage's channel count.
    pub stages: Vec<Stage>,
    pub num_classes: usize,
}

impl Default for MacroSkeleton {
    fn default() -> Self {
        Self::with_cells(1)
    }
}

impl MacroSkeleton {
    /// NATS-style skeleton (16/32/64 channels, 32×32×3 input, 10 classes)
    /// with `cells` cells per stage.
    pub fn with_cells(cells: usize) -> Self {
        MacroSkeleton {
            height: 32,
            width: 32,
            in_channels: 3,
            stages: [16, 32, 64].iter().map(|&channels| Stage { cells, channels }).collect(),
            num_classes: 10,
        }
    }

    /// Full-depth benchmark skeleton with five cells per stage.
    pub fn full() -> Self {
        Self::with_cells(5)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSkeleton(m.to_string()));
        if self.height == 0 || self.width == 0 || self.in_channels == 0 {
            return fail("input dimensions must be positive");
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if self.stages.is_empty() {
            return fail("at least one stage is required");
        }
        if self.stages.iter().any(|s| s.cells == 0 || s.channels == 0) {
            return fail("every stage needs a positive cell count and channel count");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let sk: MacroSkeleton = toml::from_str(text).map_err(|e| Error::InvalidSkeleton(e.to_string()))?;
        sk.validate()?;
        Ok(sk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    /// Multiply and add counted separately.
    pub flops: u64,
}

fn relu_conv_bn(b: &mut NetworkBuilder, x: NodeId, channels: usize, kernel: usize, stride: usize, out: usize) -> Result<NodeId> {
    let r = b.push(LayerKind::Relu, &[x])?;
    let c = b.push(LayerKind::Conv2d { in_channels: channels, out_channels: out, kernel, stride }, &[r])?;
    b.push(LayerKind::BatchNorm { channels: out }, &[c])
}

fn sum(b: &mut NetworkBuilder, like: NodeId, terms: &[NodeId]) -> Result<NodeId> {
    match terms {
        [] => b.push(LayerKind::Zero, &[like]),
        [single] => Ok(*single),
        many => b.push(LayerKind::Add, many),
    }
}

fn nats_cell(b: &mut NetworkBuilder, x: NodeId, channels: usize, ops: &[Op; 6]) -> Result<NodeId> {
    let mut nodes = vec![x];
    for j in 1..NATS_NODES {
        let mut terms = Vec::new();
        for (edge, &(from, to)) in NATS_EDGES.iter().enumerate() {
            if to != j {
                continue;
            }
            let src = nodes[from];
            match ops[edge] {
                Op::Conv1x1 => terms.push(relu_conv_bn(b, src, channels, 1, 1, channels)?),
                Op::Conv3x3 => terms.push(relu_conv_bn(b, src, channels, 3, 1, channels)?),
                Op::AvgPool3x3 => terms.push(b.push(LayerKind::AvgPool3x3 { stride: 1 }, &[src])?),
                Op::Skip => terms.push(src),
                Op::Zero => {}
                Op::MaxPool3x3 => return Err(Error::InvalidGenotype("maxpool3x3 in a nats cell".to_string())),
            }
        }
        nodes.push(sum(b, x, &terms)?);
    }
    Ok(nodes[NATS_NODES - 1])
}

fn nb101_cell(b: &mut NetworkBuilder, x: NodeId, channels: usize, cell: &Nb101Cell) -> Result<NodeId> {
    let n = cell.nodes();
    let mut nodes = vec![x];
    for v in 1..n {
        let incoming: Vec<NodeId> = (0..v).filter(|&u| cell.has_edge(u, v)).map(|u| nodes[u]).collect();
        let merged = sum(b, x, &incoming)?;
        let value = match cell.op_of(v) {
            None => merged,
            Some(Op::Conv1x1 | Op::Conv3x3) => {
                let kernel = if cell.op_of(v) == Some(Op::Conv1x1) { 1 } else { 3 };
                let c = b.push(LayerKind::Conv2d { in_channels: channels, out_channels: channels, kernel, stride: 1 }, &[merged])?;
                let bn = b.push(LayerKind::BatchNorm { channels }, &[c])?;
                b.push(LayerKind::Relu, &[bn])?
            }
            Some(Op::MaxPool3x3) => b.push(LayerKind::MaxPool3x3 { stride: 1 }, &[merged])?,
            Some(other) => return Err(Error::InvalidGenotype(format!("{other} in an nb101 cell"))),
        };
        nodes.push(value);
    }
    Ok(nodes[n - 1])
}

/// Stride-2 residual block: two ReLU-Conv-BN branches plus an
/// average-pool/1×1-conv shortcut.
fn reduction(b: &mut NetworkBuilder, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
    let a = relu_conv_bn(b, x, from, 3, 2, to)?;
    let main = relu_conv_bn(b, a, to, 3, 1, to)?;
    let pool = b.push(LayerKind::AvgPool3x3 { stride: 2 }, &[x])?;
    let shortcut = b.push(LayerKind::Conv2d { in_channels: from, out_channels: to, kernel: 1, stride: 1 }, &[pool])?;
    b.push(LayerKind::Add, &[main, shortcut])
}

/// Builds the macro skeleton around `cell`, which receives the builder,
/// the cell input and the stage channel count.
pub(crate) fn build_skeleton<F>(sk: &MacroSkeleton, mut cell: F) -> Result<Network>
where
    F: FnMut(&mut NetworkBuilder, NodeId, usize) -> Result<NodeId>,
{
    sk.validate()?;
    let mut b = NetworkBuilder::new(&sk.input_shape());
    let first = sk.stages[0].channels;
    let stem = b.push(LayerKind::Conv2d { in_channels: sk.in_channels, out_channels: first, kernel: 3, stride: 1 }, &[b.input()])?;
    let mut x = b.push(LayerKind::BatchNorm { channels: first }, &[stem])?;
    let mut channels = first;
    for (idx, stage) in sk.stages.iter().enumerate() {
        if idx > 0 {
            x = reduction(&mut b, x, channels, stage.channels)?;
            channels = stage.channels;
        }
        for _ in 0..stage.cells {
            x = cell(&mut b, x, channels)?;
        }
    }
    let bn = b.push(LayerKind::BatchNorm { channels }, &[x])?;
    let act = b.push(LayerKind::Relu, &[bn])?;
    let gap = b.push(LayerKind::GlobalAvgPool, &[act])?;
    let out = b.push(LayerKind::Linear { in_features: channels, out_features: sk.num_classes }, &[gap])?;
    Ok(b.finish(out))
}

/// Network with zero weights; enough for cost accounting.
pub fn build_uninitialized(g: &Genotype, sk: &MacroSkeleton) -> Result<Network> {
    let canonical = g.canonical();
    build_skeleton(sk, |b, x, channels| match &canonical {
        Genotype::Nats(ops) => nats_cell(b, x, channels, ops),
        Genotype::Nb101(cell) => nb101_cell(b, x, channels, cell),
    })
}

pub fn build_network(g: &Genotype, sk: &MacroSkeleton, rng: &mut Rng) -> Result<Network> {
    let mut net = build_uninitialized(g, sk)?;
    net.initialize(rng);
    Ok(net)
}

pub fn count_params(net: &Network) -> u64 {
    net.num_params() as u64
}

/// FLOPs of one forward pass over a single `input_shape` sample.
pub fn count_flops(net: &Network, input_shape: &[usize]) -> Result<u64> {
    if input_shape != net.input_shape() {
        return Err(Error::ShapeMismatch {
            node: 0,
            detail: format!("input {input_shape:?} does not match network input {:?}", net.input_shape()),
        });
    }
    let nodes = net.nodes();
    let mut flops = 0u64;
    for node in nodes {
        let out: &[usize] = &node.shape;
        let plane = |s: &[usize]| (s[1] * s[2]) as u64;
        flops += match node.kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                2 * (in_channels * out_channels * kernel * kernel) as u64 * plane(out)
            }
            LayerKind::Linear { in_features, out_features } => 2 * (in_features * out_features) as u64,
            LayerKind::AvgPool3x3 { .. } | LayerKind::MaxPool3x3 { .. } => 9 * out[0] as u64 * plane(out),
            LayerKind::GlobalAvgPool => {
                let input = &nodes[node.inputs[0]].shape;
                input.iter().product::<usize>() as u64
            }
            _ => 0,
        };
    }
    Ok(flops)
}

pub fn cost(g: &Genotype, sk: &MacroSkeleton) -> Result<CostReport> {
    let net = build_uninitialized(g, sk)?;
    Ok(CostReport { params: count_params(&net), flops: count_flops(&net, &sk.input_shape())? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{BnMode, Tensor};
    use crate::seed::rng_from;

    fn nats(names: [&str; 6]) -> Genotype {
        Genotype::nats(names.map(|n| n.parse().unwrap())).unwrap()
    }

    fn cell_only(g: &Genotype, channels: usize) -> CostReport {
        let sk = MacroSkeleton {
            stages: vec![Stage { cells: 1, channels }],
            ..MacroSkeleton::default()
        };
        let with = cost(g, &sk).unwrap();
        let without = cost(&nats(["zero"; 6]), &sk).unwrap();
        CostReport { params: with.params - without.params, flops: with.flops - without.flops }
    }

    #[test]
    fn single_conv_edge_costs_weights_plus_affine() {
        let g = nats(["zero", "zero", "conv3x3", "zero", "zero", "zero"]);
        let c = cell_only(&g, 16);
        assert_eq!(c.params, 16 * 16 * 9 + 2 * 16);
        assert_eq!(c.params, 2336);
        assert_eq!(c.flops, 2 * 16 * 16 * 9 * 1024);
        assert_eq!(c.flops, 4_718_592);
    }

    #[test]
    fn parameter_free_cells() {
        for g in [nats(["zero"; 6]), nats(["skip"; 6]), nats(["avgpool3x3", "skip", "zero", "skip", "avgpool3x3", "zero"])] {
            assert_eq!(cell_only(&g, 16).params, 0);
        }
        assert_eq!(cell_only(&nats(["zero"; 6]), 16).flops, 0);
        assert_eq!(cell_only(&nats(["skip"; 6]), 16).flops, 0);
    }

    #[test]
    fn flop_count_rejects_wrong_input() {
        let sk = MacroSkeleton::default();
        let net = build_uninitialized(&nats(["conv1x1"; 6]), &sk).unwrap();
        assert!(count_flops(&net, &[3, 16, 16]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let sk = MacroSkeleton::default();
        let g = nats(["conv3x3", "avgpool3x3", "skip", "conv1x1", "zero", "conv3x3"]);
        let net = build_network(&g, &sk, &mut rng_from(3)).unwrap();
        let out = net.forward_masks(&Tensor::zeros(&[2, 3, 32, 32]), BnMode::Standard).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_cell_reduces_to_bare_skeleton() {
        let sk = MacroSkeleton { height: 8, width: 8, ..MacroSkeleton::default() };
        let g = nats(["zero", "zero", "skip", "zero", "zero", "zero"]);
        let net = build_network(&g, &sk, &mut rng_from(8)).unwrap();
        let mut bare = build_skeleton(&sk, |_, x, _| Ok(x)).unwrap();
        assert_eq!(bare.num_params(), net.num_params());
        for (dst, src) in bare.params_mut().zip(net.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let x = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|i| ((i * 37 % 101) as f64 - 50.0) / 25.0).collect()).unwrap();
        let a = net.forward_masks(&x, BnMode::Standard).unwrap().output;
        let b = bare.forward_masks(&x, BnMode::Standard).unwrap().output;
        assert_eq!(a, b);
    }

    #[test]
    fn skeleton_parses_from_toml() {
        let sk = MacroSkeleton::from_toml(
            "height = 8\nwidth = 8\nstages = [{ cells = 2, channels = 4 }, { cells = 1, channels = 8 }]\n",
        )
        .unwrap();
        assert_eq!(sk.in_channels, 3);
        assert_eq!(sk.stages.len(), 2);
        assert!(MacroSkeleton::from_toml("stages = []").is_err());
        assert!(MacroSkeleton::from_toml("bogus = 1").is_err());
    }
}
