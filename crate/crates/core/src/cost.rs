//! Operation counting and the analytic complexity model.
//!
//! Conventions, fixed so that relative comparisons are meaningful: one
//! multiply-accumulate is 2 FLOPs; bias addition is 1 FLOP per output
//! element; inference-mode normalization is 2 FLOPs per element (scale and
//! shift); activations are 1 FLOP per element; global average pooling is one
//! add per element plus one multiply per channel. Counts are per sample and
//! depend only on the architecture, never on data.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::blocks::{self, FeatShape, LayerDesc};
use crate::error::{Error, Result};
use crate::eval::{forward_leaf_instrumented, forward_packed, EvalOptions, NormMode};
use crate::tensor::Tensor;
use crate::tree::{init_params, leaf_order, subensemble, NodeId, TreeSpec};

/// Reduced ratio of two positive integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den);
        if g == 0 {
            return Self { num, den };
        }
        Self { num: num / g, den: den / g }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl core::fmt::Display for Ratio {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Speed-up of tree sharing over independent members at depth B:
/// `R = (B+1) / (2 - 2^{-B})`, i.e. `(B+1) * 2^B / (2^{B+1} - 1)` in
/// integers. R(0) = 1; for large B it approaches (B+1)/2.
pub fn complexity_ratio(depth: usize) -> Ratio {
    let num = (depth as u64 + 1) << depth;
    let den = (1u64 << (depth + 1)) - 1;
    Ratio::new(num, den)
}

/// Per-sample FLOPs of a grouped linear layer.
pub fn flops_linear(groups: usize, cin: usize, cout: usize, bias: bool) -> Result<u64> {
    if groups == 0 || cin == 0 || cout == 0 {
        return Err(Error::InvalidArgument {
            op: "flops_linear",
            message: format!("zero extent in groups={groups}, cin={cin}, cout={cout}"),
        });
    }
    let macs = (groups * cout * cin) as u64;
    Ok(2 * macs + if bias { (groups * cout) as u64 } else { 0 })
}

/// Per-sample FLOPs of a grouped convolution producing an `ho x wo` map.
pub fn flops_conv(
    groups: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    k: usize,
    ho: usize,
    wo: usize,
    bias: bool,
) -> Result<u64> {
    if groups == 0 || cin_per_group == 0 || cout_per_group == 0 || k == 0 || ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument {
            op: "flops_conv",
            message: format!(
                "zero extent in groups={groups}, cin={cin_per_group}, cout={cout_per_group}, k={k}, out={ho}x{wo}"
            ),
        });
    }
    let positions = (ho * wo) as u64;
    let macs = (groups * cout_per_group * cin_per_group * k * k) as u64 * positions;
    let bias_adds = if bias { (groups * cout_per_group) as u64 * positions } else { 0 };
    Ok(2 * macs + bias_adds)
}

/// Per-sample FLOPs of one node's block at `level` (a single branch,
/// including the classifier head on the leaf level).
pub fn flops_block(spec: &TreeSpec, level: usize) -> Result<u64> {
    let mut shape = blocks::level_input_shape(spec, level)?;
    let (descs, out) = blocks::level_plan(spec, level, shape)?;
    let mut total = 0u64;
    for desc in &descs {
        match *desc {
            LayerDesc::Flatten { c, h, w } => {
                shape = FeatShape::Vector { dim: c * h * w };
            }
            LayerDesc::Linear { cin, cout, bias } => {
                total += flops_linear(1, cin, cout, bias)?;
                shape = FeatShape::Vector { dim: cout };
            }
            LayerDesc::Conv { cin, cout, conv_groups, k, stride, pad, bias } => {
                let FeatShape::Image { h, w, .. } = shape else {
                    return Err(Error::InvalidArgument {
                        op: "flops_block",
                        message: format!("level {level}: convolution over non-image shape"),
                    });
                };
                let ho = (h + 2 * pad - k) / stride + 1;
                let wo = (w + 2 * pad - k) / stride + 1;
                total +=
                    flops_conv(conv_groups, cin / conv_groups, cout / conv_groups, k, ho, wo, bias)?;
                shape = FeatShape::Image { c: cout, h: ho, w: wo };
            }
            LayerDesc::Norm { .. } => {
                total += 2 * shape.numel() as u64;
            }
            LayerDesc::Relu => {
                total += shape.numel() as u64;
            }
            LayerDesc::GlobalPool { c, h, w } => {
                total += (c * h * w + c) as u64;
                shape = FeatShape::Vector { dim: c };
            }
        }
    }
    debug_assert_eq!(shape, out);
    Ok(total)
}

/// Per-node, per-budget, and total operation counts for an architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub per_node: BTreeMap<NodeId, u64>,
    /// Cumulative FLOPs of the budget-b sub-ensemble, index b.
    pub per_budget: Vec<u64>,
    /// Evaluating every node once (the shared forward at full budget).
    pub t_hne: u64,
    /// Evaluating all N members as independent networks.
    pub t_ind: u64,
    /// `t_ind / t_hne`, reduced.
    pub ratio: Ratio,
    /// Whether every node costs the same (the analytic model's assumption).
    pub uniform: bool,
}

pub fn flop_report(spec: &TreeSpec) -> Result<FlopReport> {
    spec.validate()?;
    let level_cost: Vec<u64> =
        (0..=spec.depth).map(|l| flops_block(spec, l)).collect::<Result<_>>()?;
    let mut per_node = BTreeMap::new();
    for node in spec.node_ids() {
        per_node.insert(node, level_cost[node.level]);
    }
    let mut per_budget = Vec::with_capacity(spec.depth + 1);
    for b in 0..=spec.depth {
        let sub = subensemble(spec, b)?;
        per_budget.push(sub.nodes.iter().map(|n| per_node[n]).sum());
    }
    let t_hne: u64 = per_node.values().sum();
    let path_cost: u64 = level_cost.iter().sum();
    let t_ind = path_cost * spec.leaves() as u64;
    let first = per_node.values().next().copied().unwrap_or(0);
    let uniform = per_node.values().all(|&c| c == first);
    Ok(FlopReport {
        per_node,
        per_budget,
        t_hne,
        t_ind,
        ratio: Ratio::new(t_ind, t_hne),
        uniform,
    })
}

/// How block cost is assigned when checking the complexity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostModel {
    /// Every block costs exactly C, the analytic model's assumption.
    Uniform(u64),
    /// Per-node FLOP estimates from [`flop_report`]. Real architectures are
    /// rarely uniform (the classifier head alone breaks it), in which case
    /// the verification flags the assumption violation instead of failing.
    PerNodeFlops,
}

/// Instrumented check of the analytic complexity model.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVerification {
    /// `(B+1) / (2 - 2^{-B})`, reduced.
    pub analytic: Ratio,
    /// Block executions of one packed full-budget forward, counted by the
    /// evaluation engine.
    pub shared_blocks: usize,
    /// Block executions of evaluating every leaf with nothing shared.
    pub independent_blocks: usize,
    pub t_hne: u64,
    pub t_ind: u64,
    /// `t_ind / t_hne`, reduced.
    pub measured: Ratio,
    /// Whether the per-block costs satisfy the model's uniformity
    /// assumption.
    pub uniform: bool,
    pub matches: bool,
}

/// Run both evaluation strategies on a dummy input, count actual block
/// executions, weight them by the chosen cost model, and compare against the
/// analytic ratio.
pub fn verify_cost_model(spec: &TreeSpec, cost: CostModel) -> Result<CostVerification> {
    spec.validate()?;
    let store = init_params::<f32>(spec, 0)?;
    let x = match spec.input {
        crate::tree::InputSpec::Features { dim } => Tensor::zeros(&[1, dim]),
        crate::tree::InputSpec::Image { channels, height, width } => {
            Tensor::zeros(&[1, channels, height, width])
        }
    };
    let opts = EvalOptions { norm_mode: NormMode::Batch };
    let shared = forward_packed(&store, spec.depth, &x, &opts)?;
    let shared_blocks = shared.blocks_evaluated();
    let mut independent_blocks = 0usize;
    for leaf in leaf_order(spec) {
        let (_, blocks_run) = forward_leaf_instrumented(&store, leaf, &x, &opts)?;
        independent_blocks += blocks_run;
    }
    let (t_hne, t_ind, uniform) = match cost {
        CostModel::Uniform(c) => {
            if c == 0 {
                return Err(Error::InvalidArgument {
                    op: "verify_cost_model",
                    message: format!("uniform block cost must be positive, got {c}"),
                });
            }
            (shared_blocks as u64 * c, independent_blocks as u64 * c, true)
        }
        CostModel::PerNodeFlops => {
            let report = flop_report(spec)?;
            (report.t_hne, report.t_ind, report.uniform)
        }
    };
    let analytic = complexity_ratio(spec.depth);
    let measured = Ratio::new(t_ind, t_hne);
    Ok(CostVerification {
        analytic,
        shared_blocks,
        independent_blocks,
        t_hne,
        t_ind,
        measured,
        uniform,
        matches: measured == analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::toy_linear_spec;

    #[test]
    fn ratio_spot_values() {
        assert_eq!(complexity_ratio(0), Ratio { num: 1, den: 1 });
        assert_eq!(complexity_ratio(4), Ratio { num: 80, den: 31 });
        // large depth approaches (B+1)/2
        let r = complexity_ratio(20).to_f64();
        assert!((r - 21.0 / 2.0).abs() < 1e-4);
    }

    #[test]
    fn conv_flop_example() {
        // 1x1 conv, G=1, 4 -> 8 channels on a 2x2 map: 2*8*4*4 = 256
        assert_eq!(flops_conv(1, 4, 8, 1, 2, 2, false).unwrap(), 256);
    }

    #[test]
    fn doubling_groups_doubles_the_count() {
        let one = flops_linear(1, 8, 8, false).unwrap();
        let two = flops_linear(2, 8, 8, false).unwrap();
        assert_eq!(two, 2 * one);
        let c1 = flops_conv(2, 4, 4, 3, 5, 5, true).unwrap();
        let c2 = flops_conv(4, 4, 4, 3, 5, 5, true).unwrap();
        assert_eq!(c2, 2 * c1);
    }

    #[test]
    fn zero_extent_is_an_error() {
        assert!(flops_linear(1, 0, 8, false).is_err());
        assert!(flops_conv(1, 4, 0, 1, 2, 2, false).is_err());
    }

    #[test]
    fn per_budget_is_strictly_increasing_and_totals_match() {
        let spec = toy_linear_spec(4, 5, 6, 6, false);
        let report = flop_report(&spec).unwrap();
        for w in report.per_budget.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert_eq!(*report.per_budget.last().unwrap(), report.t_hne);
        assert_eq!(report.t_hne, report.per_node.values().sum::<u64>());
    }

    #[test]
    fn uniform_cost_matches_analytic_ratio_exactly() {
        for depth in 0..=6usize {
            let spec = toy_linear_spec(depth, 6, 6, 6, false);
            let v = verify_cost_model(&spec, CostModel::Uniform(10)).unwrap();
            assert!(v.matches, "depth {depth}: {} != {}", v.measured, v.analytic);
            assert_eq!(v.shared_blocks,(1 << (depth + 1)) - 1);
            assert_eq!(v.independent_blocks, (depth + 1) << depth);
            assert_eq!(v.t_hne, ((1u64 << (depth + 1)) - 1) * 10);
            assert_eq!(v.t_ind, ((depth as u64 + 1) << depth) * 10);
        }
    }

    #[test]
    fn uniform_cost_example_depth_three() {
        let spec = toy_linear_spec(3, 6, 6, 6, false);
        let v = verify_cost_model(&spec, CostModel::Uniform(10)).unwrap();
        assert_eq!(v.t_hne, 150);
        assert_eq!(v.t_ind, 320);
        assert_eq!(v.measured, Ratio { num: 32, den: 15 });
    }

    #[test]
    fn per_node_flops_flags_non_uniform_blocks() {
        // the classifier head makes the leaf level cost more than the rest
        let spec = toy_linear_spec(2, 3, 6, 6, false);
        let v = verify_cost_model(&spec, CostModel::PerNodeFlops).unwrap();
        assert!(!v.uniform);
    }

    #[test]
    fn budget_deltas_match_node_set_differences() {
        let spec = toy_linear_spec(3, 6, 6, 6, false);
        let report = flop_report(&spec).unwrap();
        for b in 1..=3usize {
            let prev = subensemble(&spec, b - 1).unwrap();
            let cur = subensemble(&spec, b).unwrap();
            let delta: u64 = cur
                .nodes
                .iter()
                .filter(|n| !prev.nodes.contains(n))
                .map(|n| report.per_node[n])
                .sum();
            assert_eq!(report.per_budget[b] - report.per_budget[b - 1], delta);
        }
    }

    #[test]
    fn depth_zero_costs_coincide() {
        let spec = toy_linear_spec(0, 6, 6, 6, false);
        let v = verify_cost_model(&spec, CostModel::Uniform(7)).unwrap();
        assert_eq!(v.t_hne, v.t_ind);
        assert_eq!(v.analytic, Ratio { num: 1, den: 1 });
        assert!(v.matches);
    }
}
