//! Minimal reverse-mode differentiation over a static layer graph.
//!
//! A [`Network`] is a list of [`LayerNode`]s in topological order. Node 0 is
//! always the input. `forward` evaluates every node and keeps the
//! activations needed by `backward`, which accumulates parameter gradients.

pub mod gradcheck;
pub mod ops;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::PackedMask;
pub use tensor::Tensor;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::Rng;
use ops::Geometry;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Standard,
    /// Every batch-norm node acts as the identity.
    Suppressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    /// Bias-free convolution, weight `[out, in, k, k]`.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    /// Per-channel affine `gamma·x + beta` with unit running statistics.
    BatchNorm { channels: usize },
    Relu,
    AvgPool3x3 { stride: usize },
    MaxPool3x3 { stride: usize },
    /// Elementwise sum of all inputs.
    Add,
    /// Zeros shaped like the input.
    Zero,
    GlobalAvgPool,
    /// `y = x·Wᵀ + b`, weight `[out, in]`, bias `[out]`.
    Linear { in_features: usize, out_features: usize },
}

impl LayerKind {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel]]
            }
            LayerKind::BatchNorm { channels } => vec![vec![channels], vec![channels]],
            LayerKind::Linear { in_features, out_features } => {
                vec![vec![out_features, in_features], vec![out_features]]
            }
            _ => Vec::new(),
        }
    }

    /// Output shape for a single sample (`[C, H, W]` or `[features]`).
    pub fn output_shape(&self, node: NodeId, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let mismatch = |detail: String| Error::ShapeMismatch { node, detail };
        let spatial = |shape: &[usize]| -> Result<(usize, usize, usize)> {
            match shape {
                [c, h, w] => Ok((*c, *h, *w)),
                other => Err(mismatch(format!("expected a [C, H, W] input, got {other:?}"))),
            }
        };
        let single = || -> Result<&[usize]> {
            match inputs {
                [one] => Ok(one),
                _ => Err(mismatch(format!("expected one input, got {}", inputs.len()))),
            }
        };
        match *self {
            LayerKind::Input => Err(mismatch("input node has no derived shape".to_string())),
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride } => {
                let (c, h, w) = spatial(single()?)?;
                if c != in_channels {
                    return Err(mismatch(format!("conv expects {in_channels} channels, got {c}")));
                }
                let geo = Geometry { channels: c, height: h, width: w, kernel, stride };
                Ok(vec![out_channels, geo.out_height(), geo.out_width()])
            }
            LayerKind::BatchNorm { channels } => {
                let shape = single()?;
                if shape.first() != Some(&channels) {
                    return Err(mismatch(format!("batch norm expects {channels} channels, got {shape:?}")));
                }
                Ok(shape.to_vec())
            }
            LayerKind::Relu | LayerKind::Zero => Ok(single()?.to_vec()),
            LayerKind::AvgPool3x3 { stride } | LayerKind::MaxPool3x3 { stride } => {
                let (c, h, w) = spatial(single()?)?;
                let geo = Geometry { channels: c, height: h, width: w, kernel: 3, stride };
                Ok(vec![c, geo.out_height(), geo.out_width()])
            }
            LayerKind::Add => {
                let first = inputs.first().ok_or_else(|| mismatch("add without inputs".to_string()))?;
                if let Some(other) = inputs.iter().find(|s| s != &first) {
                    return Err(mismatch(format!("add operands {first:?} and {other:?} differ")));
                }
                Ok(first.to_vec())
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial(single()?)?;
                Ok(vec![c])
            }
            LayerKind::Linear { in_features, out_features } => {
                let shape = single()?;
                if shape != [in_features] {
                    return Err(mismatch(format!("linear expects [{in_features}], got {shape:?}")));
                }
                Ok(vec![out_features])
            }
        }
    }

    /// Fan-in used by the Kaiming initializer.
    fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { in_channels, kernel, .. } => Some(in_channels * kernel * kernel),
            LayerKind::Linear { in_features, .. } => Some(in_features),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<Tensor>,
    /// Per-sample output shape, resolved at construction.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    batch: usize,
    mode: BnMode,
    values: Vec<Tensor>,
    masks: Vec<Option<PackedMask>>,
    argmax: Vec<Option<Vec<u32>>>,
}

/// Result of a forward pass that does not retain activations.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Tensor,
    /// Packed ReLU patterns in node order.
    pub masks: Vec<PackedMask>,
    /// Max-pool winner indices in node order.
    pub argmax: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<LayerNode>,
    output: NodeId,
    cache: Option<ForwardCache>,
    conv_grad_fault: Option<f64>,
}

/// Incremental graph construction with eager shape inference.
#[derive(Debug)]
pub struct NetworkBuilder {
    nodes: Vec<LayerNode>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        NetworkBuilder {
            nodes: vec![LayerNode {
                kind: LayerKind::Input,
                inputs: Vec::new(),
                params: Vec::new(),
                shape: input_shape.to_vec(),
            }],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    /// Appends a node with zero-initialized parameters.
    pub fn push(&mut self, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::ShapeMismatch { node: id, detail: format!("input {bad} is not an earlier node") });
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let shape = kind.output_shape(id, &shapes)?;
        let mut params: Vec<Tensor> = kind.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        if let LayerKind::BatchNorm { .. } = kind {
            params[0].data_mut().iter_mut().for_each(|g| *g = 1.0);
        }
        self.nodes.push(LayerNode { kind, inputs: inputs.to_vec(), params, shape });
        Ok(id)
    }

    pub fn finish(self, output: NodeId) -> Network {
        assert!(output < self.nodes.len());
        Network { nodes: self.nodes, output, cache: None, conv_grad_fault: None }
    }
}

impl Network {
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [LayerNode] {
        self.cache = None;
        &mut self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().flat_map(|n| n.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.nodes.iter_mut().flat_map(|n| n.params.iter_mut())
    }

    /// Fault injection for gradient-checker negative controls: every conv
    /// weight gradient produced by `backward` is multiplied by `scale`.
    #[doc(hidden)]
    pub fn inject_conv_grad_fault(&mut self, scale: f64) {
        self.conv_grad_fault = Some(scale);
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    /// Kaiming fan-in normal weights for conv and linear layers, zero
    /// biases, unit batch-norm scale and zero shift.
    pub fn initialize(&mut self, rng: &mut Rng) {
        self.cache = None;
        for node in &mut self.nodes {
            let Some(fan_in) = node.kind.fan_in() else {
                if let LayerKind::BatchNorm { .. } = node.kind {
                    node.params[0].data_mut().iter_mut().for_each(|g| *g = 1.0);
                    node.params[1].data_mut().iter_mut().for_each(|b| *b = 0.0);
                }
                continue;
            };
            let std = (2.0 / fan_in as f64).sqrt();
            for w in node.params[0].data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
            if let Some(bias) = node.params.get_mut(1) {
                bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let expected = self.input_shape();
        match input.shape().split_first() {
            Some((&batch, rest)) if rest == expected && batch > 0 => Ok(batch),
            _ => Err(Error::ShapeMismatch {
                node: 0,
                detail: format!("input {:?} does not match [N, {:?}]", input.shape(), expected),
            }),
        }
    }

    /// Forward pass that keeps every activation for a later `backward`.
    pub fn forward(&mut self, input: &Tensor, mode: BnMode) -> Result<Tensor> {
        let batch = self.check_input(input)?;
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor>> = vec![None; n];
        let mut masks = vec![None; n];
        let mut argmax = vec![None; n];
        values[0] = Some(input.clone());
        for id in 1..n {
            let step = self.eval_node(id, batch, mode, &values)?;
            values[id] = Some(step.value);
            masks[id] = step.mask;
            argmax[id] = step.argmax;
        }
        let values: Vec<Tensor> = values.into_iter().map(|v| v.expect("all nodes evaluated")).collect();
        let output = values[self.output].clone();
        self.cache = Some(ForwardCache { batch, mode, values, masks, argmax });
        Ok(output)
    }

    /// Forward pass that frees activations as soon as their consumers ran
    /// and returns the ReLU patterns instead.
    pub fn forward_masks(&self, input: &Tensor, mode: BnMode) -> Result<ForwardOutput> {
        let batch = self.check_input(input)?;
        let n = self.nodes.len();
        let mut last_use = vec![0usize; n];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = last_use[i].max(id);
            }
        }
        last_use[self.output] = usize::MAX;
        let mut values: Vec<Option<Tensor>> = vec![None; n];
        values[0] = Some(input.clone());
        let mut masks = Vec::new();
        let mut argmax = Vec::new();
        for id in 1..n {
            let step = self.eval_node(id, batch, mode, &values)?;
            values[id] = Some(step.value);
            masks.extend(step.mask);
            argmax.extend(step.argmax);
            for &i in &self.nodes[id].inputs {
                if last_use[i] == id {
                    values[i] = None;
                }
            }
        }
        let output = values[self.output].take().expect("output retained");
        Ok(ForwardOutput { output, masks, argmax })
    }

    fn eval_node(&self, id: NodeId, batch: usize, mode: BnMode, values: &[Option<Tensor>]) -> Result<NodeStep> {
        let node = &self.nodes[id];
        let input = |k: usize| -> &Tensor { values[node.inputs[k]].as_ref().expect("inputs precede their consumers") };
        let in_shape = |k: usize| -> &[usize] { &self.nodes[node.inputs[k]].shape };
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&node.shape);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        let mut mask = None;
        let mut argmax = None;
        match node.kind {
            LayerKind::Input => unreachable!("node 0 is the only input"),
            LayerKind::Conv2d { out_channels, kernel, stride, .. } => {
                let geo = geometry(in_shape(0), kernel, stride);
                ops::conv_forward(input(0).data(), batch, &geo, node.params[0].data(), out_channels, &mut out);
            }
            LayerKind::BatchNorm { channels } => {
                let x = input(0).data();
                match mode {
                    BnMode::Suppressed => out.copy_from_slice(x),
                    BnMode::Standard => {
                        let plane = node.shape[1..].iter().product::<usize>();
                        let (gamma, beta) = (node.params[0].data(), node.params[1].data());
                        for (i, (y, &v)) in out.iter_mut().zip(x).enumerate() {
                            let c = (i / plane) % channels;
                            *y = gamma[c] * v + beta[c];
                        }
                    }
                }
            }
            LayerKind::Relu => {
                mask = Some(ops::relu_forward(input(0).data(), batch, &mut out));
            }
            LayerKind::AvgPool3x3 { stride } => {
                let geo = geometry(in_shape(0), 3, stride);
                ops::avg_pool_forward(input(0).data(), batch, &geo, &mut out);
            }
            LayerKind::MaxPool3x3 { stride } => {
                let geo = geometry(in_shape(0), 3, stride);
                let mut idx = vec![0u32; out_len];
                ops::max_pool_forward(input(0).data(), batch, &geo, &mut out, &mut idx);
                argmax = Some(idx);
            }
            LayerKind::Add => {
                for k in 0..node.inputs.len() {
                    for (y, &v) in out.iter_mut().zip(input(k).data()) {
                        *y += v;
                    }
                }
            }
            LayerKind::Zero => {}
            LayerKind::GlobalAvgPool => {
                let plane: usize = in_shape(0)[1..].iter().product();
                for (y, chunk) in out.iter_mut().zip(input(0).data().chunks_exact(plane)) {
                    *y = chunk.iter().sum::<f64>() / plane as f64;
                }
            }
            LayerKind::Linear { in_features, out_features } => {
                let (w, b) = (node.params[0].data(), node.params[1].data());
                for (xs, ys) in input(0).data().chunks_exact(in_features).zip(out.chunks_exact_mut(out_features)) {
                    for (o, y) in ys.iter_mut().enumerate() {
                        *y = b[o] + w[o * in_features..(o + 1) * in_features].iter().zip(xs).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
            }
        }
        Ok(NodeStep { value: Tensor::with_data(out_shape, out), mask, argmax })
    }

    /// Packed ReLU patterns from the last retained forward pass.
    pub fn cached_masks(&self) -> Result<Vec<&PackedMask>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        Ok(cache.masks.iter().flatten().collect())
    }

    /// Max-pool winner indices from the last retained forward pass.
    pub fn cached_argmax(&self) -> Result<Vec<&[u32]>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        Ok(cache.argmax.iter().flatten().map(Vec::as_slice).collect())
    }

    /// Backpropagates `output_grad` and accumulates into parameter grads.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<()> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let batch = cache.batch;
        let expected = cache.values[self.output].shape();
        if output_grad.shape() != expected {
            return Err(Error::ShapeMismatch {
                node: self.output,
                detail: format!("output gradient {:?} does not match {:?}", output_grad.shape(), expected),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[self.output] = Some(output_grad.data().to_vec());
        let cache = self.cache.take().expect("checked above");
        for id in (1..n).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let inputs = self.nodes[id].inputs.clone();
            let mut input_grads: Vec<Vec<f64>> = inputs.iter().map(|&i| vec![0.0; cache.values[i].len()]).collect();
            let in_shape = |k: usize| -> Vec<usize> { cache.values[inputs[k]].shape()[1..].to_vec() };
            let node = &mut self.nodes[id];
            match node.kind {
                LayerKind::Input => unreachable!(),
                LayerKind::Conv2d { out_channels, kernel, stride, .. } => {
                    let geo = geometry(&in_shape(0), kernel, stride);
                    let x = cache.values[inputs[0]].data();
                    let weight = node.params[0].data().to_vec();
                    let mut dweight = vec![0.0; weight.len()];
                    ops::conv_backward(x, batch, &geo, &weight, out_channels, &dy, &mut dweight, &mut input_grads[0]);
                    if let Some(scale) = self.conv_grad_fault {
                        dweight.iter_mut().for_each(|d| *d *= scale);
                    }
                    add_into(node.params[0].grad_mut(), &dweight);
                }
                LayerKind::BatchNorm { channels } => match cache.mode {
                    BnMode::Suppressed => input_grads[0].copy_from_slice(&dy),
                    BnMode::Standard => {
                        let plane = node.shape[1..].iter().product::<usize>();
                        let x = cache.values[inputs[0]].data();
                        let gamma = node.params[0].data().to_vec();
                        let mut dgamma = vec![0.0; channels];
                        let mut dbeta = vec![0.0; channels];
                        for (i, (&g, &v)) in dy.iter().zip(x).enumerate() {
                            let c = (i / plane) % channels;
                            dgamma[c] += g * v;
                            dbeta[c] += g;
                            input_grads[0][i] = gamma[c] * g;
                        }
                        add_into(node.params[0].grad_mut(), &dgamma);
                        add_into(node.params[1].grad_mut(), &dbeta);
                    }
                },
                LayerKind::Relu => {
                    let mask = cache.masks[id].as_ref().expect("relu caches its mask");
                    ops::relu_backward(mask, &dy, &mut input_grads[0]);
                }
                LayerKind::AvgPool3x3 { stride } => {
                    let geo = geometry(&in_shape(0), 3, stride);
                    ops::avg_pool_backward(batch, &geo, &dy, &mut input_grads[0]);
                }
                LayerKind::MaxPool3x3 { stride } => {
                    let geo = geometry(&in_shape(0), 3, stride);
                    let idx = cache.argmax[id].as_ref().expect("max pool caches its winners");
                    ops::max_pool_backward(batch, &geo, idx, &dy, &mut input_grads[0]);
                }
                LayerKind::Add => {
                    for g in input_grads.iter_mut() {
                        g.copy_from_slice(&dy);
                    }
                }
                LayerKind::Zero => {}
                LayerKind::GlobalAvgPool => {
                    let plane: usize = in_shape(0)[1..].iter().product();
                    for (chunk, &g) in input_grads[0].chunks_exact_mut(plane).zip(&dy) {
                        chunk.iter_mut().for_each(|d| *d = g / plane as f64);
                    }
                }
                LayerKind::Linear { in_features, out_features } => {
                    let x = cache.values[inputs[0]].data();
                    let w = node.params[0].data().to_vec();
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; out_features];
                    for ((xs, gs), dxs) in x
                        .chunks_exact(in_features)
                        .zip(dy.chunks_exact(out_features))
                        .zip(input_grads[0].chunks_exact_mut(in_features))
                    {
                        for (o, &g) in gs.iter().enumerate() {
                            db[o] += g;
                            let row = &w[o * in_features..(o + 1) * in_features];
                            for i in 0..in_features {
                                dw[o * in_features + i] += g * xs[i];
                                dxs[i] += g * row[i];
                            }
                        }
                    }
                    add_into(node.params[0].grad_mut(), &dw);
                    add_into(node.params[1].grad_mut(), &db);
                }
            }
            for (i, g) in inputs.into_iter().zip(input_grads) {
                match grads[i].as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => grads[i] = Some(g),
                }
            }
        }
        self.cache = Some(cache);
        Ok(())
    }
}

struct NodeStep {
    value: Tensor,
    mask: Option<PackedMask>,
    argmax: Option<Vec<u32>>,
}

fn geometry(shape: &[usize], kernel: usize, stride: usize) -> Geometry {
    Geometry { channels: shape[0], height: shape[1], width: shape[2], kernel, stride }
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut b = NetworkBuilder::new(&[3]);
        let out = b.push(LayerKind::Linear { in_features: 3, out_features: 2 }, &[0]).unwrap();
        let mut net = b.finish(out);
        net.initialize(&mut rng_from(1));
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        net.forward(&x, BnMode::Standard).unwrap();
        let g = Tensor::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap();
        net.backward(&g).unwrap();
        let dw = net.nodes()[1].params[0].grad().unwrap();
        assert_eq!(dw, &[3.0, -6.0, 1.5, -1.0, 2.0, -0.5]);
        assert_eq!(net.nodes()[1].params[1].grad().unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn gradients_accumulate_without_zeroing() {
        let mut b = NetworkBuilder::new(&[2, 4, 4]);
        let c = b.push(LayerKind::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1 }, &[0]).unwrap();
        let r = b.push(LayerKind::Relu, &[c]).unwrap();
        let p = b.push(LayerKind::GlobalAvgPool, &[r]).unwrap();
        let mut net = b.finish(p);
        net.initialize(&mut rng_from(2));
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ones = Tensor::filled(&[1, 3], 1.0);
        net.forward(&x, BnMode::Standard).unwrap();
        net.backward(&ones).unwrap();
        let once = net.nodes()[1].params[0].grad().unwrap().to_vec();
        net.backward(&ones).unwrap();
        let twice = net.nodes()[1].params[0].grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_requires_forward() {
        let mut b = NetworkBuilder::new(&[2]);
        let out = b.push(LayerKind::Linear { in_features: 2, out_features: 1 }, &[0]).unwrap();
        let mut net = b.finish(out);
        assert!(matches!(net.backward(&Tensor::zeros(&[1, 1])), Err(Error::NoForwardCache)));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut b = NetworkBuilder::new(&[3, 8, 8]);
        let err = b.push(LayerKind::Conv2d { in_channels: 4, out_channels: 4, kernel: 3, stride: 1 }, &[0]);
        assert!(matches!(err, Err(Error::ShapeMismatch { node: 1, .. })));
        let c = b.push(LayerKind::Conv2d { in_channels: 3, out_channels: 4, kernel: 3, stride: 2 }, &[0]).unwrap();
        assert!(matches!(b.push(LayerKind::Add, &[0, c]), Err(Error::ShapeMismatch { node: 2, .. })));
        let net = b.finish(c);
        let bad = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(net.forward_masks(&bad, BnMode::Standard), Err(Error::ShapeMismatch { node: 0, .. })));
    }

    #[test]
    fn suppressed_batch_norm_ignores_affine_parameters() {
        let mut b = NetworkBuilder::new(&[2, 3, 3]);
        let bn = b.push(LayerKind::BatchNorm { channels: 2 }, &[0]).unwrap();
        let net0 = b.finish(bn);
        let mut net1 = net0.clone();
        net1.nodes_mut()[1].params[0].data_mut().copy_from_slice(&[5.0, -2.0]);
        net1.nodes_mut()[1].params[1].data_mut().copy_from_slice(&[0.3, 0.7]);
        let x = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(|i| i as f64 - 9.0).collect()).unwrap();
        let y0 = net0.forward_masks(&x, BnMode::Suppressed).unwrap().output;
        let y1 = net1.forward_masks(&x, BnMode::Suppressed).unwrap().output;
        assert_eq!(y0, y1);
        assert_ne!(y1, net1.forward_masks(&x, BnMode::Standard).unwrap().output);
    }
}
