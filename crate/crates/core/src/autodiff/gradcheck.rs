//! Central finite-difference verification of `Network::backward`.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::{BnMode, Network, Tensor};
use crate::error::Result;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Number of parameter coordinates to compare; all of them when the
    /// network has fewer.
    pub samples: usize,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { epsilon: 1e-4, samples: 200, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates rejected because the perturbation flipped a ReLU or
    /// max-pool decision.
    pub skipped: usize,
    pub max_rel_dev: f64,
    /// `(node, param, index)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_dev <= self.tolerance
    }
}

/// Loss value plus the ReLU mask words and max-pool winners that produced it.
type Probe = (f64, Vec<Vec<u64>>, Vec<Vec<u32>>);

/// Compares analytic gradients of `L = Σ output·r` (random fixed `r`) with
/// central differences. Coordinates whose ±ε perturbations land on different
/// sides of a ReLU kink or max-pool tie are skipped and replaced.
pub fn finite_diff_check(
    net: &mut Network,
    input: &Tensor,
    tolerance: f64,
    config: &GradCheckConfig,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let output = net.forward(input, BnMode::Standard)?;
    let projection: Vec<f64> = (0..output.len()).map(|_| StandardNormal.sample(rng)).collect();
    let projection = Tensor::from_vec(output.shape(), projection)?;
    net.zero_grad();
    net.backward(&projection)?;

    let mut coords = Vec::new();
    for (n, node) in net.nodes().iter().enumerate() {
        for (p, param) in node.params.iter().enumerate() {
            coords.extend((0..param.len()).map(|i| (n, p, i)));
        }
    }
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(n, p, i)| net.nodes()[n].params[p].grad().map_or(0.0, |g| g[i]))
        .collect();
    let order = sample(rng, coords.len(), coords.len());

    let loss = |net: &Network| -> Result<Probe> {
        let out = net.forward_masks(input, BnMode::Standard)?;
        let value = out.output.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum();
        Ok((value, out.masks.into_iter().map(|m| m.words).collect(), out.argmax))
    };

    let mut report =
        GradCheckReport { checked: 0, skipped: 0, max_rel_dev: 0.0, worst: None, tolerance };
    for k in order.iter() {
        if report.checked >= config.samples {
            break;
        }
        let (n, p, i) = coords[k];
        let original = net.nodes()[n].params[p].data()[i];
        net.nodes_mut()[n].params[p].data_mut()[i] = original + config.epsilon;
        let plus = loss(net)?;
        net.nodes_mut()[n].params[p].data_mut()[i] = original - config.epsilon;
        let minus = loss(net)?;
        net.nodes_mut()[n].params[p].data_mut()[i] = original;
        if plus.1 != minus.1 || plus.2 != minus.2 {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * config.epsilon);
        let a = analytic[k];
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
        report.checked += 1;
        if dev > report.max_rel_dev || report.worst.is_none() {
            report.max_rel_dev = report.max_rel_dev.max(dev);
            report.worst = Some((n, p, i));
        }
    }
    Ok(report)
}
