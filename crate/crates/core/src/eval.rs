//! Per-model logits and prefix-ensemble outputs, computed three
//! interchangeable ways.
//!
//! - [`forward_subensemble_sequential`] walks root-to-leaf paths one node at
//!   a time, reusing shared ancestors through the activation cache.
//! - [`forward_packed`] makes a single pass over levels, replicating channel
//!   groups at each branch point and applying grouped operations with a
//!   doubled group count; channel slice g of the output is leaf g's logits.
//! - [`extend_budget`] grows a cached evaluation from budget b to b+1 by
//!   evaluating only the sibling subtree that the wider budget adds.
//!
//! All three agree bit-for-bit: every kernel iterates groups independently
//! in a fixed order, and prefix outputs sum leaf logits in leaf order.
//!
//! [`forward_full_tape`] is the same packed walk recorded on an autodiff
//! tape; training uses it at full budget.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::blocks::{self, LayerDesc, NORM_BETA, NORM_COUNT, NORM_EPS, NORM_GAMMA, NORM_MEAN, NORM_VAR};
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dDims};
use crate::tensor::{Elem, Tensor};
use crate::tree::{subensemble, AverageMode, NodeId, NormStatUpdate, ParamStore, TreeSpec};

/// Which statistics normalization layers use during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Running statistics recorded during training; errors if none exist.
    #[default]
    Running,
    /// This batch's own statistics. Evaluation never updates the store.
    Batch,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub norm_mode: NormMode,
}

/// Output of one evaluation: per-leaf logits, the prefix-ensemble ladder
/// y^0..y^b, and the per-node activation cache that incremental extension
/// reuses.
#[derive(Debug, Clone)]
pub struct EvalResult<E: Elem> {
    budget: usize,
    per_leaf_logits: Vec<Tensor<E>>,
    prefix_outputs: Vec<Tensor<E>>,
    cache: BTreeMap<NodeId, Tensor<E>>,
    blocks_evaluated: usize,
    param_version: u64,
    input: Tensor<E>,
    options: EvalOptions,
}

impl<E: Elem> EvalResult<E> {
    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn models(&self) -> usize {
        self.per_leaf_logits.len()
    }

    pub fn per_leaf_logits(&self) -> &[Tensor<E>] {
        &self.per_leaf_logits
    }

    /// y^b for `b <= budget`.
    pub fn prefix_output(&self, b: usize) -> Option<&Tensor<E>> {
        self.prefix_outputs.get(b)
    }

    pub fn prefix_outputs(&self) -> &[Tensor<E>] {
        &self.prefix_outputs
    }

    /// The widest completed prefix output; under anytime interruption this
    /// is what gets returned.
    pub fn ensemble_output(&self) -> &Tensor<E> {
        self.prefix_outputs.last().expect("at least y^0 always exists")
    }

    pub fn cached_activation(&self, node: NodeId) -> Option<&Tensor<E>> {
        self.cache.get(&node)
    }

    /// Number of node-block executions performed to produce this result.
    pub fn blocks_evaluated(&self) -> usize {
        self.blocks_evaluated
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }
}

/// Argmax per row; ties break toward the lowest class index.
pub fn predict<E: Elem>(y: &Tensor<E>) -> Vec<usize> {
    let classes = *y.shape().last().unwrap_or(&1);
    let rows = y.numel() / classes;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &y.data()[r * classes..(r + 1) * classes];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

fn validate_input<E: Elem>(spec: &TreeSpec, x: &Tensor<E>) -> Result<usize> {
    let expect: Vec<usize> = match spec.input {
        crate::tree::InputSpec::Features { dim } => alloc::vec![dim],
        crate::tree::InputSpec::Image { channels, height, width } => {
            alloc::vec![channels, height, width]
        }
    };
    if x.shape().len() != expect.len() + 1 || x.shape()[1..] != expect[..] {
        return Err(Error::InvalidArgument {
            op: "forward",
            message: format!(
                "input shape {:?} does not match the architecture's {:?} (plus batch axis)",
                x.shape(),
                expect
            ),
        });
    }
    Ok(x.shape()[0])
}

/// Per-group channel slices of a packed activation: `[batch, G*c, ...]`
/// yields G tensors `[batch, c, ...]`.
fn split_groups<E: Elem>(t: &Tensor<E>, groups: usize) -> Vec<Tensor<E>> {
    let batch = t.shape()[0];
    let per_row = t.numel() / batch;
    let block = per_row / groups;
    let mut shape = t.shape().to_vec();
    shape[1] /= groups;
    (0..groups)
        .map(|g| {
            let mut data = Vec::with_capacity(batch * block);
            for b in 0..batch {
                let off = b * per_row + g * block;
                data.extend_from_slice(&t.data()[off..off + block]);
            }
            Tensor::new(&shape, data).expect("split arithmetic")
        })
        .collect()
}

fn pack_slot<E: Elem>(store: &ParamStore<E>, nodes: &[NodeId], slot: usize) -> Vec<E> {
    let mut data = Vec::new();
    for &n in nodes {
        data.extend_from_slice(store.slot(n, slot).value.data());
    }
    data
}

/// Apply one level's layer stack to a packed activation carrying `nodes`'s
/// branches in order. `G = nodes.len()`.
fn apply_level<E: Elem>(
    store: &ParamStore<E>,
    level: usize,
    nodes: &[NodeId],
    input: Tensor<E>,
    options: &EvalOptions,
) -> Result<Tensor<E>> {
    let spec = store.spec();
    let descs = blocks::level_layers(spec, level)?;
    let g = nodes.len();
    let mut cur = input;
    let mut slot = 0usize;
    for desc in &descs {
        match *desc {
            LayerDesc::Flatten { c, h, w } => {
                let batch = cur.shape()[0];
                cur = cur.reshaped(&[batch, g * c * h * w])?;
            }
            LayerDesc::Linear { cin, cout, bias } => {
                let batch = cur.shape()[0];
                let w = pack_slot(store, nodes, slot);
                let b = bias.then(|| pack_slot(store, nodes, slot + 1));
                let mut out = Tensor::zeros(&[batch, g * cout]);
                kernels::grouped_linear_fwd(
                    batch,
                    g,
                    cin,
                    cout,
                    cur.data(),
                    &w,
                    b.as_deref(),
                    out.data_mut(),
                );
                cur = out;
            }
            LayerDesc::Conv { cin, cout, conv_groups, k, stride, pad, bias } => {
                let batch = cur.shape()[0];
                let (h, w) = (cur.shape()[2], cur.shape()[3]);
                let dims = Conv2dDims {
                    batch,
                    groups: g * conv_groups,
                    cin: cin / conv_groups,
                    cout: cout / conv_groups,
                    h,
                    w,
                    kh: k,
                    kw: k,
                    stride,
                    pad,
                    ho: Conv2dDims::out_extent(h, k, stride, pad),
                    wo: Conv2dDims::out_extent(w, k, stride, pad),
                };
                let kernel = pack_slot(store, nodes, slot);
                let b = bias.then(|| pack_slot(store, nodes, slot + 1));
                let mut out = Tensor::zeros(&[batch, g * cout, dims.ho, dims.wo]);
                kernels::conv2d_fwd(&dims, cur.data(), &kernel, b.as_deref(), out.data_mut());
                cur = out;
            }
            LayerDesc::Norm { c } => {
                let batch = cur.shape()[0];
                let channels = g * c;
                let spatial: usize = cur.shape()[2..].iter().product();
                let gamma = pack_slot(store, nodes, slot + NORM_GAMMA);
                let beta = pack_slot(store, nodes, slot + NORM_BETA);
                let (mean, var) = match options.norm_mode {
                    NormMode::Batch => kernels::bn_stats(cur.data(), batch, channels, spatial),
                    NormMode::Running => {
                        for &n in nodes {
                            if store.slot(n, slot + NORM_COUNT).value.item() <= E::ZERO {
                                return Err(Error::NormStatsMissing);
                            }
                        }
                        (
                            pack_slot(store, nodes, slot + NORM_MEAN),
                            pack_slot(store, nodes, slot + NORM_VAR),
                        )
                    }
                };
                let invstd = kernels::bn_invstd(&var, E::from_f64(NORM_EPS));
                let mut out = Tensor::zeros(cur.shape());
                kernels::bn_apply(
                    cur.data(),
                    batch,
                    channels,
                    spatial,
                    &mean,
                    &invstd,
                    &gamma,
                    &beta,
                    out.data_mut(),
                );
                cur = out;
            }
            LayerDesc::Relu => {
                let mut out = Tensor::zeros(cur.shape());
                kernels::relu_fwd(cur.data(), out.data_mut());
                cur = out;
            }
            LayerDesc::GlobalPool { c, h, w } => {
                let batch = cur.shape()[0];
                let mut out = Tensor::zeros(&[batch, g * c]);
                kernels::global_avg_pool_fwd(cur.data(), batch, g * c, h * w, out.data_mut());
                cur = out;
            }
        }
        slot += desc.slot_count();
    }
    Ok(cur)
}

/// Prefix ladder y^0..y^budget from per-leaf logits: each entry is the mean
/// of the first 2^b leaves, summed in leaf order. In probability-averaging
/// mode the leaves are passed through a softmax first.
fn prefix_ladder<E: Elem>(
    spec: &TreeSpec,
    budget: usize,
    per_leaf: &[Tensor<E>],
) -> Result<Vec<Tensor<E>>> {
    let transformed: Vec<Tensor<E>> = match spec.average {
        AverageMode::Logits => per_leaf.to_vec(),
        AverageMode::Probs => per_leaf
            .iter()
            .map(|t| {
                let (batch, classes) = (t.shape()[0], t.shape()[1]);
                let mut out = Tensor::zeros(t.shape());
                kernels::softmax_rows(t.data(), batch, classes, E::ONE, out.data_mut());
                out
            })
            .collect(),
    };
    let mut out = Vec::with_capacity(budget + 1);
    for b in 0..=budget {
        let parts: Vec<&Tensor<E>> = transformed[..1 << b].iter().collect();
        out.push(Tensor::mean_of(&parts)?);
    }
    Ok(out)
}

/// Zero-based logits of one leaf model: the composition of the B+1 blocks on
/// its root-to-leaf path.
pub fn forward_leaf<E: Elem>(
    store: &ParamStore<E>,
    leaf: NodeId,
    x: &Tensor<E>,
    options: &EvalOptions,
) -> Result<Tensor<E>> {
    Ok(forward_leaf_instrumented(store, leaf, x, options)?.0)
}

/// [`forward_leaf`] plus the number of block executions it performed (always
/// B+1: nothing is shared or cached here).
pub fn forward_leaf_instrumented<E: Elem>(
    store: &ParamStore<E>,
    leaf: NodeId,
    x: &Tensor<E>,
    options: &EvalOptions,
) -> Result<(Tensor<E>, usize)> {
    let spec = store.spec();
    if leaf.level != spec.depth || leaf.index >= spec.leaves() {
        return Err(Error::InvalidArgument {
            op: "forward_leaf",
            message: format!("({}, {}) is not a leaf", leaf.level, leaf.index),
        });
    }
    validate_input(spec, x)?;
    let mut cur = x.clone();
    let mut blocks_run = 0;
    for level in 0..=spec.depth {
        let node = NodeId::new(level, spec.ancestor_index(leaf.index, level));
        cur = apply_level(store, level, &[node], cur, options)?;
        blocks_run += 1;
    }
    Ok((cur, blocks_run))
}

/// Evaluate the budget-b sub-ensemble one node at a time. Shared blocks run
/// exactly once; the block-execution count equals the sub-ensemble's node
/// count.
pub fn forward_subensemble_sequential<E: Elem>(
    store: &ParamStore<E>,
    budget: usize,
    x: &Tensor<E>,
    options: &EvalOptions,
) -> Result<EvalResult<E>> {
    let spec = store.spec();
    validate_input(spec, x)?;
    let sub = subensemble(spec, budget)?;
    let mut cache: BTreeMap<NodeId, Tensor<E>> = BTreeMap::new();
    let mut blocks_run = 0;
    for leaf in &sub.leaves {
        for level in 0..=spec.depth {
            let node = NodeId::new(level, spec.ancestor_index(leaf.index, level));
            if cache.contains_key(&node) {
                continue;
            }
            let input = match spec.parent(node) {
                None => x.clone(),
                Some(p) => cache[&p].clone(),
            };
            let out = apply_level(store, level, &[node], input, options)?;
            blocks_run += 1;
            cache.insert(node, out);
        }
    }
    let per_leaf: Vec<Tensor<E>> = sub.leaves.iter().map(|l| cache[l].clone()).collect();
    let prefix_outputs = prefix_ladder(spec, budget, &per_leaf)?;
    Ok(EvalResult {
        budget,
        per_leaf_logits: per_leaf,
        prefix_outputs,
        cache,
        blocks_evaluated: blocks_run,
        param_version: store.version(),
        input: x.clone(),
        options: *options,
    })
}

/// Evaluate the budget-b sub-ensemble in one packed pass over levels,
/// doubling the group count at each branch point.
pub fn forward_packed<E: Elem>(
    store: &ParamStore<E>,
    budget: usize,
    x: &Tensor<E>,
    options: &EvalOptions,
) -> Result<EvalResult<E>> {
    let spec = store.spec();
    validate_input(spec, x)?;
    if budget > spec.depth {
        return Err(Error::BudgetOutOfRange { budget, depth: spec.depth });
    }
    let models = 1usize << budget;
    let mut cache: BTreeMap<NodeId, Tensor<E>> = BTreeMap::new();
    let mut blocks_run = 0;
    let mut groups = 1usize;
    let mut cur = x.clone();
    for level in 0..=spec.depth {
        let active = spec.active_groups(models, level);
        debug_assert_eq!(active, level_active_nodes(spec, budget, level));
        if active > groups {
            let factor = active / groups;
            let batch = cur.shape()[0];
            let per_row = cur.numel() / batch;
            let mut shape = cur.shape().to_vec();
            shape[1] *= factor;
            let mut out = Tensor::zeros(&shape);
            kernels::replicate_groups_fwd(
                batch,
                groups,
                per_row / groups,
                factor,
                cur.data(),
                out.data_mut(),
            );
            cur = out;
            groups = active;
        }
        let nodes: Vec<NodeId> = (0..active).map(|i| NodeId::new(level, i)).collect();
        cur = apply_level(store, level, &nodes, cur, options)?;
        blocks_run += active;
        for (slice, node) in split_groups(&cur, active).into_iter().zip(nodes) {
            cache.insert(node, slice);
        }
    }
    let per_leaf = split_groups(&cur, models);
    let prefix_outputs = prefix_ladder(spec, budget, &per_leaf)?;
    Ok(EvalResult {
        budget,
        per_leaf_logits: per_leaf,
        prefix_outputs,
        cache,
        blocks_evaluated: blocks_run,
        param_version: store.version(),
        input: x.clone(),
        options: *options,
    })
}

/// Active node count at a level of the budget-b sub-ensemble, derived from
/// the explicit node set (cross-checks the group arithmetic).
fn level_active_nodes(spec: &TreeSpec, budget: usize, level: usize) -> usize {
    subensemble(spec, budget)
        .map(|s| s.nodes.iter().filter(|n| n.level == level).count())
        .unwrap_or(0)
}

/// Extend a cached evaluation from budget b to b+1, evaluating only the
/// nodes the wider budget adds. The result is bit-identical to a fresh
/// forward at b+1 under the same options.
pub fn extend_budget<E: Elem>(
    prev: &EvalResult<E>,
    store: &ParamStore<E>,
    x: &Tensor<E>,
) -> Result<EvalResult<E>> {
    let spec = store.spec();
    if store.version() != prev.param_version {
        return Err(Error::StaleCache {
            cached: prev.param_version,
            current: store.version(),
        });
    }
    if prev.budget >= spec.depth {
        return Err(Error::BudgetOutOfRange { budget: prev.budget + 1, depth: spec.depth });
    }
    if !x.bit_eq(&prev.input) {
        return Err(Error::InputMismatch);
    }
    let budget = prev.budget + 1;
    let old_models = 1usize << prev.budget;
    let new_models = 1usize << budget;
    let mut cache = prev.cache.clone();
    let mut blocks_run = prev.blocks_evaluated;
    let options = prev.options;

    // Walk levels evaluating only the newly active node range; its input is
    // either cached parent activations (at the first new level) or the
    // previous level's fresh outputs, replicated at branch points.
    let mut cur: Option<Tensor<E>> = None;
    let mut cur_groups = 0usize;
    for level in 0..=spec.depth {
        let lo = spec.active_groups(old_models, level);
        let hi = spec.active_groups(new_models, level);
        if hi == lo {
            continue;
        }
        let nodes: Vec<NodeId> = (lo..hi).map(|i| NodeId::new(level, i)).collect();
        let input = match cur.take() {
            None => {
                // First new level: gather cached parent outputs, repeating
                // each for its children in the new range, exactly as
                // replication would lay them out.
                let mut parts: Vec<Tensor<E>> = Vec::new();
                for n in &nodes {
                    let p = spec.parent(*n).expect("new nodes never appear at the root level");
                    let t = prev.cache.get(&p).ok_or(Error::InputMismatch)?;
                    parts.push(t.clone());
                }
                concat_groups(&parts)
            }
            Some(prev_out) => {
                let factor = (hi - lo) / cur_groups;
                if factor > 1 {
                    let batch = prev_out.shape()[0];
                    let per_row = prev_out.numel() / batch;
                    let mut shape = prev_out.shape().to_vec();
                    shape[1] *= factor;
                    let mut out = Tensor::zeros(&shape);
                    kernels::replicate_groups_fwd(
                        batch,
                        cur_groups,
                        per_row / cur_groups,
                        factor,
                        prev_out.data(),
                        out.data_mut(),
                    );
                    out
                } else {
                    prev_out
                }
            }
        };
        let out = apply_level(store, level, &nodes, input, &options)?;
        blocks_run += nodes.len();
        for (slice, node) in split_groups(&out, nodes.len()).into_iter().zip(nodes) {
            cache.insert(node, slice);
        }
        cur_groups = hi - lo;
        cur = Some(out);
    }

    let mut per_leaf = prev.per_leaf_logits.clone();
    for i in old_models..new_models {
        per_leaf.push(cache[&NodeId::new(spec.depth, i)].clone());
    }
    let prefix_outputs = prefix_ladder(spec, budget, &per_leaf)?;
    Ok(EvalResult {
        budget,
        per_leaf_logits: per_leaf,
        prefix_outputs,
        cache,
        blocks_evaluated: blocks_run,
        param_version: prev.param_version,
        input: prev.input.clone(),
        options,
    })
}

/// Concatenate same-shaped per-branch tensors along the channel axis.
fn concat_groups<E: Elem>(parts: &[Tensor<E>]) -> Tensor<E> {
    let batch = parts[0].shape()[0];
    let block = parts[0].numel() / batch;
    let mut shape = parts[0].shape().to_vec();
    shape[1] *= parts.len();
    let mut data = Vec::with_capacity(batch * block * parts.len());
    for b in 0..batch {
        for p in parts {
            data.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }
    Tensor::new(&shape, data).expect("concat arithmetic")
}

// ---------------------------------------------------------------------------
// Tape forward (training path)
// ---------------------------------------------------------------------------

/// Packed full-ensemble forward recorded on an autodiff tape.
pub struct TapeForward<E: Elem> {
    /// Leaf logits in leaf order.
    pub per_leaf: Vec<Var>,
    /// y^0..y^B as logit means.
    pub prefixes: Vec<Var>,
    /// Every parameter leaf created, addressed by (node, slot).
    pub param_vars: Vec<(NodeId, usize, Var)>,
    /// Batch statistics collected by training-mode normalization, to be
    /// folded into the store after the optimizer step.
    pub stat_updates: Vec<NormStatUpdate<E>>,
    /// Tree depth, so loss builders can check completeness.
    pub depth: usize,
}

/// Record the packed full-budget forward on `tape`. With `train_norm` set,
/// normalization uses batch statistics and reports them; otherwise it reads
/// running statistics.
pub fn forward_full_tape<E: Elem>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    x: &Tensor<E>,
    train_norm: bool,
) -> Result<TapeForward<E>> {
    let spec = store.spec();
    validate_input(spec, x)?;
    let models = spec.leaves();
    let mut param_vars = Vec::new();
    let mut stat_updates = Vec::new();
    let mut groups = 1usize;
    let mut cur = tape.leaf(x.clone());
    for level in 0..=spec.depth {
        let active = spec.active_groups(models, level);
        if active > groups {
            cur = tape.replicate_groups(cur, groups, active / groups)?;
            groups = active;
        }
        let nodes: Vec<NodeId> = (0..active).map(|i| NodeId::new(level, i)).collect();
        cur = apply_level_tape(
            tape,
            store,
            level,
            &nodes,
            cur,
            train_norm,
            &mut param_vars,
            &mut stat_updates,
        )?;
    }
    let classes = spec.classes;
    let mut per_leaf = Vec::with_capacity(models);
    for g in 0..models {
        per_leaf.push(tape.slice_cols(cur, g * classes, classes)?);
    }
    let mut prefixes = Vec::with_capacity(spec.depth + 1);
    for b in 0..=spec.depth {
        prefixes.push(tape.mean_stack(&per_leaf[..1 << b])?);
    }
    Ok(TapeForward { per_leaf, prefixes, param_vars, stat_updates, depth: spec.depth })
}

#[allow(clippy::too_many_arguments)]
fn apply_level_tape<E: Elem>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    level: usize,
    nodes: &[NodeId],
    input: Var,
    train_norm: bool,
    param_vars: &mut Vec<(NodeId, usize, Var)>,
    stat_updates: &mut Vec<NormStatUpdate<E>>,
) -> Result<Var> {
    let spec = store.spec();
    let descs = blocks::level_layers(spec, level)?;
    let g = nodes.len();
    let mut cur = input;
    let mut slot = 0usize;

    let load = |tape: &mut Tape<E>, param_vars: &mut Vec<(NodeId, usize, Var)>, s: usize| -> Result<Var> {
        let vars: Vec<Var> = nodes
            .iter()
            .map(|&n| {
                let v = tape.leaf(store.slot(n, s).value.clone());
                param_vars.push((n, s, v));
                v
            })
            .collect();
        tape.stack_groups(&vars)
    };

    for desc in &descs {
        match *desc {
            LayerDesc::Flatten { c, h, w } => {
                let batch = tape.value(cur).shape()[0];
                cur = tape.reshape(cur, &[batch, g * c * h * w])?;
            }
            LayerDesc::Linear { bias, .. } => {
                let w = load(tape, param_vars, slot)?;
                let b = if bias { Some(load(tape, param_vars, slot + 1)?) } else { None };
                cur = tape.grouped_linear(cur, w, b, g)?;
            }
            LayerDesc::Conv { cin, cout, conv_groups, k, stride, pad, bias } => {
                let kernel = load(tape, param_vars, slot)?;
                let kernel = tape.reshape(
                    kernel,
                    &[g * conv_groups, cout / conv_groups, cin / conv_groups, k, k],
                )?;
                let b = if bias { Some(load(tape, param_vars, slot + 1)?) } else { None };
                cur = tape.grouped_conv2d(cur, kernel, b, g * conv_groups, stride, pad)?;
            }
            LayerDesc::Norm { c } => {
                let gamma = load(tape, param_vars, slot + NORM_GAMMA)?;
                let beta = load(tape, param_vars, slot + NORM_BETA)?;
                if train_norm {
                    let (out, stats) = tape.batch_norm_train(cur, gamma, beta, NORM_EPS)?;
                    cur = out;
                    // Batch statistics come back packed over the active
                    // nodes; store them per node for the running update.
                    for (i, &n) in nodes.iter().enumerate() {
                        let mean = Tensor::new(
                            &[c],
                            stats.mean.data()[i * c..(i + 1) * c].to_vec(),
                        )?;
                        let var =
                            Tensor::new(&[c], stats.var.data()[i * c..(i + 1) * c].to_vec())?;
                        stat_updates.push(NormStatUpdate {
                            node: n,
                            mean_slot: slot + NORM_MEAN,
                            var_slot: slot + NORM_VAR,
                            count_slot: slot + NORM_COUNT,
                            mean,
                            var,
                        });
                    }
                } else {
                    for &n in nodes {
                        if store.slot(n, slot + NORM_COUNT).value.item() <= E::ZERO {
                            return Err(Error::NormStatsMissing);
                        }
                    }
                    let mean = Tensor::new(&[g * c], pack_slot(store, nodes, slot + NORM_MEAN))?;
                    let var = Tensor::new(&[g * c], pack_slot(store, nodes, slot + NORM_VAR))?;
                    cur = tape.batch_norm_infer(cur, gamma, beta, &mean, &var, NORM_EPS)?;
                }
            }
            LayerDesc::Relu => {
                cur = tape.relu(cur);
            }
            LayerDesc::GlobalPool { .. } => {
                cur = tape.global_avg_pool(cur)?;
            }
        }
        slot += desc.slot_count();
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::toy_linear_spec;
    use crate::tree::init_params;

    fn toy_input(batch: usize, dim: usize, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(&[batch, dim], data).unwrap()
    }

    #[test]
    fn depth_zero_packed_equals_leaf_forward() {
        let spec = toy_linear_spec(0, 3, 4, 6, false);
        let store = init_params::<f64>(&spec, 3).unwrap();
        let x = toy_input(2, 4, 0);
        let opts = EvalOptions::default();
        let leaf = forward_leaf(&store, NodeId::new(0, 0), &x, &opts).unwrap();
        let packed = forward_packed(&store, 0, &x, &opts).unwrap();
        assert!(leaf.bit_eq(&packed.per_leaf_logits()[0]));
        assert!(leaf.bit_eq(packed.prefix_output(0).unwrap()));
    }

    #[test]
    fn shared_root_activation_is_cached_once() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let store = init_params::<f64>(&spec, 5).unwrap();
        let x = toy_input(2, 4, 1);
        let res =
            forward_subensemble_sequential(&store, 2, &x, &EvalOptions::default()).unwrap();
        // all four leaves share the root block's activation
        assert!(res.cached_activation(NodeId::new(0, 0)).is_some());
        assert_eq!(res.blocks_evaluated(), 7);
    }

    #[test]
    fn sequential_block_count_matches_closed_form() {
        for depth in 0..=6usize {
            let spec = toy_linear_spec(depth, 3, 4, 6, false);
            let store = init_params::<f64>(&spec, 5).unwrap();
            let x = toy_input(1, 4, 2);
            for b in 0..=depth {
                let opts = EvalOptions::default();
                let seq = forward_subensemble_sequential(&store, b, &x, &opts).unwrap();
                assert_eq!(seq.blocks_evaluated(), (depth - b) + (1 << (b + 1)) - 1);
                let packed = forward_packed(&store, b, &x, &opts).unwrap();
                assert_eq!(packed.blocks_evaluated(), seq.blocks_evaluated());
            }
        }
    }

    #[test]
    fn packed_equals_sequential_bitwise() {
        let spec = toy_linear_spec(3, 5, 4, 6, false);
        let store = init_params::<f64>(&spec, 9).unwrap();
        let x = toy_input(3, 4, 3);
        let opts = EvalOptions::default();
        for b in 0..=3usize {
            let seq = forward_subensemble_sequential(&store, b, &x, &opts).unwrap();
            let packed = forward_packed(&store, b, &x, &opts).unwrap();
            assert_eq!(seq.models(), packed.models());
            for (a, c) in seq.per_leaf_logits().iter().zip(packed.per_leaf_logits()) {
                assert!(a.bit_eq(c));
            }
            for (a, c) in seq.prefix_outputs().iter().zip(packed.prefix_outputs()) {
                assert!(a.bit_eq(c));
            }
            assert_eq!(seq.blocks_evaluated(), packed.blocks_evaluated());
        }
    }

    #[test]
    fn extension_chain_is_bit_exact_and_counts_work() {
        let spec = toy_linear_spec(3, 5, 4, 6, false);
        let store = init_params::<f64>(&spec, 11).unwrap();
        let x = toy_input(2, 4, 4);
        let opts = EvalOptions::default();
        let mut res = forward_packed(&store, 0, &x, &opts).unwrap();
        for b in 1..=3usize {
            res = extend_budget(&res, &store, &x).unwrap();
            let fresh = forward_packed(&store, b, &x, &opts).unwrap();
            assert_eq!(res.blocks_evaluated(), fresh.blocks_evaluated());
            for (a, c) in res.per_leaf_logits().iter().zip(fresh.per_leaf_logits()) {
                assert!(a.bit_eq(c));
            }
            for (a, c) in res.prefix_outputs().iter().zip(fresh.prefix_outputs()) {
                assert!(a.bit_eq(c));
            }
        }
    }

    #[test]
    fn extension_rejects_mutated_params() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let mut store = init_params::<f64>(&spec, 2).unwrap();
        let x = toy_input(1, 4, 5);
        let res = forward_packed(&store, 0, &x, &EvalOptions::default()).unwrap();
        for (_, _, p) in store.params_mut() {
            if p.kind.trainable() {
                for v in p.value.data_mut() {
                    *v += 0.5;
                }
            }
        }
        assert!(matches!(
            extend_budget(&res, &store, &x),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn extension_rejects_different_input() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let store = init_params::<f64>(&spec, 2).unwrap();
        let x = toy_input(1, 4, 5);
        let res = forward_packed(&store, 0, &x, &EvalOptions::default()).unwrap();
        let other = toy_input(1, 4, 6);
        assert!(matches!(extend_budget(&res, &store, &other), Err(Error::InputMismatch)));
    }

    #[test]
    fn prefix_consistency_across_budgets() {
        let spec = toy_linear_spec(3, 4, 4, 6, false);
        let store = init_params::<f64>(&spec, 13).unwrap();
        let x = toy_input(2, 4, 7);
        let opts = EvalOptions::default();
        let full = forward_packed(&store, 3, &x, &opts).unwrap();
        for b in 0..3usize {
            let small = forward_packed(&store, b, &x, &opts).unwrap();
            for bb in 0..=b {
                assert!(small
                    .prefix_output(bb)
                    .unwrap()
                    .bit_eq(full.prefix_output(bb).unwrap()));
            }
        }
    }

    #[test]
    fn prefix_is_leaf_mean() {
        let spec = toy_linear_spec(1, 3, 4, 6, false);
        let store = init_params::<f64>(&spec, 17).unwrap();
        let x = toy_input(2, 4, 8);
        let res = forward_packed(&store, 1, &x, &EvalOptions::default()).unwrap();
        let manual = Tensor::mean_of(&[&res.per_leaf_logits()[0], &res.per_leaf_logits()[1]])
            .unwrap();
        assert!(manual.bit_eq(res.prefix_output(1).unwrap()));
    }

    #[test]
    fn predict_argmax_and_ties() {
        let y = Tensor::new(&[3, 2], vec![0.1, 0.9, 0.5, 0.5, 2.0, -1.0]).unwrap();
        assert_eq!(predict(&y), vec![1, 0, 0]);
        let shifted = y.map(|v| v + 100.0);
        assert_eq!(predict(&shifted), predict(&y));
    }

    #[test]
    fn tape_forward_matches_packed_eval() {
        let spec = toy_linear_spec(2, 3, 4, 6, false);
        let store = init_params::<f64>(&spec, 23).unwrap();
        let x = toy_input(2, 4, 9);
        let packed = forward_packed(
            &store,
            2,
            &x,
            &EvalOptions { norm_mode: NormMode::Batch },
        )
        .unwrap();
        let mut tape = Tape::new();
        let fwd = forward_full_tape(&mut tape, &store, &x, true).unwrap();
        for (v, t) in fwd.per_leaf.iter().zip(packed.per_leaf_logits()) {
            assert!(tape.value(*v).bit_eq(t));
        }
        for (v, t) in fwd.prefixes.iter().zip(packed.prefix_outputs()) {
            assert!(tape.value(*v).bit_eq(t));
        }
    }

    #[test]
    fn norm_infer_before_stats_errors() {
        let spec = toy_linear_spec(1, 3, 4, 6, true);
        let store = init_params::<f64>(&spec, 1).unwrap();
        let x = toy_input(2, 4, 10);
        let err = forward_packed(&store, 1, &x, &EvalOptions::default()).unwrap_err();
        assert_eq!(err, Error::NormStatsMissing);
        // batch-statistics mode works without any recorded stats
        assert!(forward_packed(&store, 1, &x, &EvalOptions { norm_mode: NormMode::Batch }).is_ok());
    }
}
