//! Binary-tree architecture: node identity, per-level block specifications,
//! parameter storage with per-branch seeding, and sub-ensemble selection.
//!
//! A tree of depth B composes B+1 blocks per model; level b holds its own
//! parameter sets, one per node, and the N = 2^B root-to-leaf paths are the
//! ensemble members. Sibling subtrees share every ancestor's parameters, so
//! the total number of parameter sets is 2^{B+1}-1 instead of (B+1)*2^B.
//!
//! Evaluating models in depth-first order makes every prefix of leaves a
//! nested sub-ensemble; children of branch g sit at contiguous indices
//! 2g and 2g+1, so a sub-ensemble is also a contiguous channel slice in the
//! packed evaluation engine.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, LayerDesc};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Sanity cap on tree depth (2^16 leaves is far beyond desk scale).
pub const MAX_DEPTH: usize = 16;

/// Identity of one tree node: `level` in `0..=B`, `index` under 2^level.
/// The parent of `(b, k)` is `(b-1, floor(k/2))` in the binary topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(level: usize, index: usize) -> Self {
        Self { level, index }
    }
}

impl core::fmt::Display for NodeId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "n{}_{}", self.level, self.index)
    }
}

/// Kind of computation a level performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Stack of grouped fully-connected layers.
    Linear,
    /// Stack of grouped 2-d convolutions.
    Conv,
}

fn default_stride() -> usize {
    1
}
fn default_kernel() -> usize {
    3
}

/// One level's block definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Number of stacked layers in the block.
    pub layers: usize,
    /// Output width per branch: features for linear blocks, channels for
    /// conv blocks.
    pub width: usize,
    /// Spatial stride, applied by the first layer of a conv block.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Convolution kernel extent, 1 or 3.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Use a depthwise k*k convolution followed by a pointwise 1*1 instead
    /// of a dense k*k convolution.
    #[serde(default)]
    pub depthwise: bool,
    /// Insert batch normalization after every layer.
    #[serde(default)]
    pub norm: bool,
}

/// Shape of the data fed to the root block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    Features { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

/// How parameter sets are laid out across levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Binary tree: level b has 2^b parameter sets.
    #[default]
    Hne,
    /// Shared backbone that splits to all N branches in one step: levels
    /// below `split_level` have one parameter set, levels at or above it
    /// have N.
    Multibranch { split_level: usize },
}

/// Whether ensemble outputs average member logits or member probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    #[default]
    Logits,
    Probs,
}

/// The full architecture definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    /// Tree depth B; the ensemble has N = 2^B members.
    pub depth: usize,
    /// Number of output classes.
    pub classes: usize,
    pub input: InputSpec,
    /// One block definition per level, `depth + 1` entries.
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub topology: TopologyKind,
    #[serde(default)]
    pub average: AverageMode,
    /// Keep bias terms on layers that are followed by normalization.
    #[serde(default)]
    pub bias_with_norm: bool,
}

impl TreeSpec {
    /// Number of ensemble members, N = 2^B.
    pub fn leaves(&self) -> usize {
        1usize << self.depth
    }

    /// Parameter-set count at a level.
    pub fn level_count(&self, level: usize) -> usize {
        match self.topology {
            TopologyKind::Hne => 1usize << level,
            TopologyKind::Multibranch { split_level } => {
                if level < split_level {
                    1
                } else {
                    self.leaves()
                }
            }
        }
    }

    /// Total number of parameter sets (block instances) in the tree.
    pub fn node_count(&self) -> usize {
        (0..=self.depth).map(|l| self.level_count(l)).sum()
    }

    /// All nodes in (level, index) order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..=self.depth).flat_map(move |l| (0..self.level_count(l)).map(move |i| NodeId::new(l, i)))
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        if node.level == 0 {
            return None;
        }
        let ratio = self.level_count(node.level) / self.level_count(node.level - 1);
        Some(NodeId::new(node.level - 1, node.index / ratio))
    }

    /// Index of the ancestor of leaf `leaf_index` at `level`.
    pub fn ancestor_index(&self, leaf_index: usize, level: usize) -> usize {
        leaf_index / (self.leaves() / self.level_count(level))
    }

    /// Number of distinct parameter sets at `level` touched by the first
    /// `models` leaves.
    pub fn active_groups(&self, models: usize, level: usize) -> usize {
        let span = self.leaves() / self.level_count(level);
        models.div_ceil(span)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidArgument { op: "TreeSpec", message };
        if self.depth > MAX_DEPTH {
            return Err(fail(format!("depth {} exceeds the maximum of {MAX_DEPTH}", self.depth)));
        }
        if self.classes == 0 {
            return Err(fail(String::from("class count must be positive")));
        }
        if self.blocks.len() != self.depth + 1 {
            return Err(fail(format!(
                "expected {} block definitions for depth {}, got {}",
                self.depth + 1,
                self.depth,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers == 0 || b.width == 0 {
                return Err(fail(format!("block {i}: layers and width must be positive")));
            }
            if b.kind == BlockKind::Conv {
                if !(b.kernel == 1 || b.kernel == 3) {
                    return Err(fail(format!("block {i}: kernel must be 1 or 3, got {}", b.kernel)));
                }
                if b.stride == 0 {
                    return Err(fail(format!("block {i}: stride must be positive")));
                }
            }
        }
        if let TopologyKind::Multibranch { split_level } = self.topology {
            if split_level == 0 || split_level > self.depth {
                return Err(fail(format!(
                    "split level {split_level} out of range 1..={}",
                    self.depth
                )));
            }
        }
        // Walking the shape ladder catches conv-after-features mismatches
        // and spatial extents shrinking to nothing.
        blocks::output_shape(self)?;
        Ok(())
    }
}

/// The nested sub-ensemble evaluated under budget exponent `b`: the 2^b
/// leaves of the height-b subtree containing leaf 0, plus every node on
/// their root paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubEnsembleSpec {
    pub budget: usize,
    pub leaves: Vec<NodeId>,
    pub nodes: Vec<NodeId>,
}

impl SubEnsembleSpec {
    pub fn models(&self) -> usize {
        self.leaves.len()
    }
}

/// Leaves in depth-first order. Leaf 0 (the all-left path) comes first and
/// the prefix of length 2^b equals the budget-b leaf set for every b.
pub fn leaf_order(spec: &TreeSpec) -> Vec<NodeId> {
    fn descend(spec: &TreeSpec, node: NodeId, out: &mut Vec<NodeId>) {
        if node.level == spec.depth {
            out.push(node);
            return;
        }
        let ratio = spec.level_count(node.level + 1) / spec.level_count(node.level);
        for c in 0..ratio {
            descend(spec, NodeId::new(node.level + 1, node.index * ratio + c), out);
        }
    }
    let mut out = Vec::with_capacity(spec.leaves());
    descend(spec, NodeId::new(0, 0), &mut out);
    out
}

/// Sub-ensemble for budget exponent `b` (0 ..= depth).
pub fn subensemble(spec: &TreeSpec, budget: usize) -> Result<SubEnsembleSpec> {
    if budget > spec.depth {
        return Err(Error::BudgetOutOfRange { budget, depth: spec.depth });
    }
    let models = 1usize << budget;
    let leaves: Vec<NodeId> = (0..models).map(|i| NodeId::new(spec.depth, i)).collect();
    let mut nodes = BTreeSet::new();
    for leaf in &leaves {
        let mut cur = *leaf;
        nodes.insert(cur);
        while let Some(p) = spec.parent(cur) {
            nodes.insert(p);
            cur = p;
        }
    }
    Ok(SubEnsembleSpec { budget, leaves, nodes: nodes.into_iter().collect() })
}

/// The one-step-split baseline topology: everything below `split_level` is a
/// shared backbone, everything at or above it is N independent branches.
pub fn multibranch_variant(spec: &TreeSpec, split_level: usize) -> Result<TreeSpec> {
    if split_level == 0 || split_level > spec.depth {
        return Err(Error::InvalidArgument {
            op: "multibranch_variant",
            message: format!("split level {split_level} out of range 1..={}", spec.depth),
        });
    }
    let mut out = spec.clone();
    out.topology = TopologyKind::Multibranch { split_level };
    out.validate()?;
    Ok(out)
}

/// Role of a parameter tensor; drives initialization, weight decay, and
/// which tensors the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Running statistics and their batch counter; never optimized.
    NormStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::NormStat)
    }

    /// Weight decay applies to weights and biases but not to normalization
    /// scale/shift parameters.
    pub fn weight_decayed(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<E: Elem> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams<E: Elem> {
    pub seed: u64,
    pub slots: Vec<Param<E>>,
}

/// Every node's parameter tensors, keyed by [`NodeId`]. Mutation goes
/// through [`ParamStore::params_mut`] or [`ParamStore::update_norm_stats`],
/// both of which bump the version counter that evaluation caches check.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E: Elem> {
    spec: TreeSpec,
    nodes: BTreeMap<NodeId, NodeParams<E>>,
    version: u64,
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-node stream seed: a hash of the master seed with the node identity,
/// so sibling branches start from different draws.
pub fn node_seed(master_seed: u64, node: NodeId) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ node.level as u64) ^ node.index as u64)
}

/// Initialize every node's parameters. Weights are fan-in-scaled uniform
/// draws (bound sqrt(6 / fan_in)), biases and normalization shifts start at
/// zero, normalization scales at one. Deterministic in `master_seed`.
pub fn init_params<E: Elem>(spec: &TreeSpec, master_seed: u64) -> Result<ParamStore<E>> {
    spec.validate()?;
    let mut nodes = BTreeMap::new();
    for node in spec.node_ids() {
        let seed = node_seed(master_seed, node);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descs = blocks::level_layers(spec, node.level)?;
        let mut slots = Vec::new();
        for (di, desc) in descs.iter().enumerate() {
            init_desc_slots(&mut rng, di, desc, &mut slots);
        }
        nodes.insert(node, NodeParams { seed, slots });
    }
    Ok(ParamStore { spec: spec.clone(), nodes, version: 0 })
}

fn uniform<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape, data).expect("shape/product mismatch cannot happen")
}

fn init_desc_slots<E: Elem>(
    rng: &mut ChaCha8Rng,
    di: usize,
    desc: &LayerDesc,
    slots: &mut Vec<Param<E>>,
) {
    let mut push = |suffix: &str, kind: ParamKind, value: Tensor<E>| {
        slots.push(Param { name: format!("l{di}.{suffix}"), kind, value });
    };
    match *desc {
        LayerDesc::Linear { cin, cout, bias } => {
            let bound = libm::sqrt(6.0 / cin as f64);
            push("weight", ParamKind::Weight, uniform(rng, &[cout, cin], bound));
            if bias {
                push("bias", ParamKind::Bias, Tensor::zeros(&[cout]));
            }
        }
        LayerDesc::Conv { cin, cout, conv_groups, k, bias, .. } => {
            let cin_pg = cin / conv_groups;
            let fan_in = (cin_pg * k * k) as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            push("weight", ParamKind::Weight, uniform(rng, &[cout, cin_pg, k, k], bound));
            if bias {
                push("bias", ParamKind::Bias, Tensor::zeros(&[cout]));
            }
        }
        LayerDesc::Norm { c } => {
            push("gamma", ParamKind::NormScale, Tensor::filled(&[c], E::ONE));
            push("beta", ParamKind::NormShift, Tensor::zeros(&[c]));
            push("running_mean", ParamKind::NormStat, Tensor::zeros(&[c]));
            push("running_var", ParamKind::NormStat, Tensor::filled(&[c], E::ONE));
            push("batches_seen", ParamKind::NormStat, Tensor::zeros(&[1]));
        }
        LayerDesc::Flatten { .. } | LayerDesc::Relu | LayerDesc::GlobalPool { .. } => {}
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeParams<E>> {
        self.nodes.get(&id)
    }

    /// All parameters in deterministic (node, slot) order.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, usize, &Param<E>)> {
        self.nodes.iter().flat_map(|(id, np)| {
            np.slots.iter().enumerate().map(move |(si, p)| (*id, si, p))
        })
    }

    /// Mutable parameter access; bumps the version so cached evaluations
    /// become stale.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (NodeId, usize, &mut Param<E>)> {
        self.version += 1;
        self.nodes.iter_mut().flat_map(|(id, np)| {
            np.slots.iter_mut().enumerate().map(move |(si, p)| (*id, si, p))
        })
    }

    pub(crate) fn slot(&self, node: NodeId, slot: usize) -> &Param<E> {
        &self.nodes[&node].slots[slot]
    }

    /// Fold a batch's normalization statistics into the running buffers:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_norm_stats(
        &mut self,
        updates: &[NormStatUpdate<E>],
        momentum: f64,
    ) -> Result<()> {
        if updates.is_empty() {
            return Ok(());
        }
        self.version += 1;
        let m = E::from_f64(momentum);
        let keep = E::ONE - m;
        for u in updates {
            let np = self.nodes.get_mut(&u.node).ok_or(Error::InvalidArgument {
                op: "update_norm_stats",
                message: format!("unknown node ({}, {})", u.node.level, u.node.index),
            })?;
            let blend = |t: &mut Tensor<E>, src: &Tensor<E>| {
                for (r, &b) in t.data_mut().iter_mut().zip(src.data().iter()) {
                    *r = keep * *r + m * b;
                }
            };
            blend(&mut np.slots[u.mean_slot].value, &u.mean);
            blend(&mut np.slots[u.var_slot].value, &u.var);
            let count = &mut np.slots[u.count_slot].value;
            let next = count.item() + E::ONE;
            count.data_mut()[0] = next;
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params()
            .filter(|(_, _, p)| p.kind.trainable())
            .map(|(_, _, p)| p.value.numel())
            .sum()
    }

    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        ParamStore {
            spec: self.spec.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|(id, np)| {
                    (
                        *id,
                        NodeParams {
                            seed: np.seed,
                            slots: np
                                .slots
                                .iter()
                                .map(|p| Param {
                                    name: p.name.clone(),
                                    kind: p.kind,
                                    value: p.value.cast(),
                                })
                                .collect(),
                        },
                    )
                })
                .collect(),
            version: self.version,
        }
    }

    /// Rebuild a store from serialized pieces (used by checkpoint loading).
    /// The node set must exactly match the architecture's.
    pub fn from_parts(
        spec: TreeSpec,
        nodes: BTreeMap<NodeId, NodeParams<E>>,
        version: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let expected: Vec<NodeId> = spec.node_ids().collect();
        let got: Vec<NodeId> = nodes.keys().copied().collect();
        if expected != got {
            return Err(Error::InvalidArgument {
                op: "ParamStore::from_parts",
                message: format!(
                    "node set mismatch: expected {} nodes, got {}",
                    expected.len(),
                    got.len()
                ),
            });
        }
        Ok(Self { spec, nodes, version })
    }
}

/// One normalization layer's batch statistics, addressed by node and slot.
#[derive(Debug, Clone)]
pub struct NormStatUpdate<E: Elem> {
    pub node: NodeId,
    pub mean_slot: usize,
    pub var_slot: usize,
    pub count_slot: usize,
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::toy_linear_spec;

    #[test]
    fn leaf_order_is_index_order() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let order = leaf_order(&spec);
        assert_eq!(order.len(), 4);
        for (i, id) in order.iter().enumerate() {
            assert_eq!(*id, NodeId::new(2, i));
        }
    }

    #[test]
    fn leaf_order_depth_zero_single_leaf() {
        let spec = toy_linear_spec(0, 3, 4, 6, false);
        assert_eq!(leaf_order(&spec), alloc::vec![NodeId::new(0, 0)]);
    }

    #[test]
    fn leaf_order_prefix_is_smaller_budget() {
        let spec = toy_linear_spec(3, 3, 4, 6, false);
        let order = leaf_order(&spec);
        let sub = subensemble(&spec, 1).unwrap();
        assert_eq!(&order[..2], sub.leaves.as_slice());
    }

    #[test]
    fn node_count_closed_form() {
        // |nodes(b)| = (B - b) + (2^{b+1} - 1)
        for depth in 0..=6usize {
            let spec = toy_linear_spec(depth, 3, 4, 6, false);
            for b in 0..=depth {
                let sub = subensemble(&spec, b).unwrap();
                assert_eq!(sub.nodes.len(), (depth - b) + ((1 << (b + 1)) - 1));
            }
        }
    }

    #[test]
    fn subensembles_are_nested() {
        let spec = toy_linear_spec(4, 3, 4, 6, false);
        for b in 0..4 {
            let small = subensemble(&spec, b).unwrap();
            let big = subensemble(&spec, b + 1).unwrap();
            for leaf in &small.leaves {
                assert!(big.leaves.contains(leaf));
            }
            for node in &small.nodes {
                assert!(big.nodes.contains(node));
            }
        }
    }

    #[test]
    fn subensemble_rejects_out_of_range_budget() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        assert!(matches!(
            subensemble(&spec, 3),
            Err(Error::BudgetOutOfRange { budget: 3, depth: 2 })
        ));
    }

    #[test]
    fn full_budget_covers_every_node() {
        let spec = toy_linear_spec(4, 3, 4, 6, false);
        let sub = subensemble(&spec, 4).unwrap();
        assert_eq!(sub.nodes.len(), (1 << 5) - 1);
        assert_eq!(sub.nodes.len(), spec.node_count());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = toy_linear_spec(2, 3, 4, 6, true);
        let a = init_params::<f32>(&spec, 42).unwrap();
        let b = init_params::<f32>(&spec, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sibling_nodes_draw_different_tensors() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let store = init_params::<f32>(&spec, 7).unwrap();
        let a = store.node(NodeId::new(1, 0)).unwrap();
        let b = store.node(NodeId::new(1, 1)).unwrap();
        assert_ne!(a.seed, b.seed);
        assert_ne!(a.slots[0].value, b.slots[0].value);
    }

    #[test]
    fn different_master_seeds_differ_on_leaf0_path() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let a = init_params::<f32>(&spec, 1).unwrap();
        let b = init_params::<f32>(&spec, 2).unwrap();
        assert_ne!(
            a.node(NodeId::new(0, 0)).unwrap().slots[0].value,
            b.node(NodeId::new(0, 0)).unwrap().slots[0].value
        );
    }

    #[test]
    fn param_set_count_matches_sharing_arithmetic() {
        let spec = toy_linear_spec(4, 3, 4, 6, false);
        let store = init_params::<f32>(&spec, 0).unwrap();
        assert_eq!(store.nodes.len(), (1 << 5) - 1);
        // every node appears exactly once
        let ids: Vec<NodeId> = store.nodes.keys().copied().collect();
        let expected: Vec<NodeId> = spec.node_ids().collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn multibranch_counts() {
        // split at 3 in a 5-block tree: 3 backbone instances + 2 * 16 branch
        // instances
        let spec = toy_linear_spec(4, 3, 4, 6, false);
        let mb = multibranch_variant(&spec, 3).unwrap();
        assert_eq!(mb.node_count(), 3 + 2 * 16);
    }

    #[test]
    fn multibranch_split_one_of_depth_one_is_the_tree() {
        let spec = toy_linear_spec(1, 3, 4, 6, false);
        let mb = multibranch_variant(&spec, 1).unwrap();
        for l in 0..=1 {
            assert_eq!(mb.level_count(l), spec.level_count(l));
        }
        assert_eq!(
            leaf_order(&mb),
            leaf_order(&spec),
        );
    }

    #[test]
    fn multibranch_rejects_bad_split() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        assert!(multibranch_variant(&spec, 0).is_err());
        assert!(multibranch_variant(&spec, 3).is_err());
    }

    #[test]
    fn subensemble_nodes_match_path_union_for_multibranch_too() {
        let spec = toy_linear_spec(3, 3, 4, 6, false);
        let mb = multibranch_variant(&spec, 2).unwrap();
        for b in 0..=3 {
            let sub = subensemble(&mb, b).unwrap();
            // backbone nodes shared, branch nodes per leaf
            let mut expect = BTreeSet::new();
            for leaf in 0..(1usize << b) {
                for level in 0..=3 {
                    expect.insert(NodeId::new(level, mb.ancestor_index(leaf, level)));
                }
            }
            assert_eq!(sub.nodes, expect.into_iter().collect::<Vec<_>>());
        }
    }
}
