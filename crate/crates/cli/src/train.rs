//! The optimization loop: SGD with momentum and weight decay under a cosine
//! schedule, per-epoch metric collection (per-budget accuracy and logit
//! diversity), and checkpointing.
//!
//! A run is fully determined by (dataset, architecture, config, master
//! seed): data order, parameter draws, and augmentation all derive from the
//! seed, every reduction has a fixed order, and nothing is parallelized
//! non-deterministically. Two identical runs write identical metrics and
//! checkpoints, byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hne_core::autodiff::Tape;
use hne_core::eval::{forward_full_tape, forward_packed, predict, EvalOptions, NormMode};
use hne_core::losses::{build_loss, diversity_logit_std, LossConfig};
use hne_core::optim::{cosine_lr, sgd_step, SgdHyper, SgdState};
use hne_core::tensor::Tensor;
use hne_core::tree::{init_params, NodeId, ParamStore, TreeSpec};
use hne_core::NORM_MOMENTUM;

use crate::data::{augment, AugmentPolicy, Dataset};
use crate::{checkpoint, Error, Result};

fn d_epochs() -> usize {
    200
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    5e-4
}
fn d_seed() -> u64 {
    1
}
fn d_cadence() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_seed")]
    pub master_seed: u64,
    /// Evaluate (and log per-budget metrics) every this many epochs.
    #[serde(default = "d_cadence")]
    pub eval_cadence: usize,
    /// Additionally checkpoint every this many epochs; 0 keeps only the
    /// final checkpoint.
    #[serde(default)]
    pub checkpoint_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_cadence == 0 {
            return Err(Error::Config(
                "batch_size and eval_cadence must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive; momentum and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One metrics row: the budget-b accuracy at one epoch, along with the
/// epoch-level training losses and diversity.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub budget: usize,
    pub models: usize,
    pub accuracy: f64,
    pub diversity: f64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_independent: Option<f64>,
    pub loss_structured: Option<f64>,
    pub loss_codistill: Option<f64>,
    pub loss_hierarchical: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,budget,models,accuracy,diversity,lr,loss_total,loss_independent,loss_structured,loss_codistill,loss_hierarchical";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.budget,
                r.models,
                r.accuracy,
                r.diversity,
                r.lr,
                r.loss_total,
                opt(r.loss_independent),
                opt(r.loss_structured),
                opt(r.loss_codistill),
                opt(r.loss_hierarchical),
            ));
        }
        out
    }

    /// Final-epoch accuracy per budget.
    pub fn final_accuracies(&self) -> Vec<f64> {
        let last = match self.rows.iter().map(|r| r.epoch).max() {
            Some(e) => e,
            None => return Vec::new(),
        };
        let mut rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.epoch == last).collect();
        rows.sort_by_key(|r| r.budget);
        rows.iter().map(|r| r.accuracy).collect()
    }

    pub fn final_diversity(&self) -> Option<f64> {
        self.rows.last().map(|r| r.diversity)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub opt_state: SgdState<f32>,
    pub log: MetricLog,
}

/// Per-budget test accuracy and the logit-diversity metric, all derived
/// from one full-budget forward per batch (prefix outputs reused, nothing
/// recomputed).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_budget_accuracy: Vec<f64>,
    pub diversity: f64,
}

pub fn evaluate(store: &ParamStore<f32>, dataset: &Dataset, options: &EvalOptions) -> Result<EvalSummary> {
    let spec = store.spec();
    let depth = spec.depth;
    let models = spec.leaves();
    let eval_batch = 256usize;
    let mut correct = vec![0usize; depth + 1];
    let mut leaf_rows: Vec<Vec<f32>> = vec![Vec::new(); models];
    let total = dataset.len();
    let mut i = 0;
    while i < total {
        let hi = (i + eval_batch).min(total);
        let indices: Vec<usize> = (i..hi).collect();
        let (batch, labels) = dataset.batch(&indices);
        let res = forward_packed(store, depth, &batch, options)?;
        for b in 0..=depth {
            let preds = predict(res.prefix_output(b).expect("budget within range"));
            for (p, l) in preds.iter().zip(labels.iter()) {
                if p == l {
                    correct[b] += 1;
                }
            }
        }
        for (m, t) in res.per_leaf_logits().iter().enumerate() {
            leaf_rows[m].extend_from_slice(t.data());
        }
        i = hi;
    }
    let per_leaf: Vec<Tensor<f32>> = leaf_rows
        .into_iter()
        .map(|rows| Tensor::new(&[total, spec.classes], rows).expect("row arithmetic"))
        .collect();
    let diversity = if models >= 2 { diversity_logit_std(&per_leaf)? } else { 0.0 };
    Ok(EvalSummary {
        per_budget_accuracy: correct.iter().map(|&c| c as f64 / total as f64).collect(),
        diversity,
    })
}

/// Train from scratch. Checkpoints and no other files are written, and only
/// when `out_dir` is given; the caller owns metrics/config persistence.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &TreeSpec,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    augment_policy: Option<&AugmentPolicy>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate().map_err(Error::Core)?;
    let mut store = init_params::<f32>(spec, cfg.master_seed)?;
    let mut opt_state = SgdState::new();
    let mut log = MetricLog::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.master_seed.wrapping_add(1));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.master_seed.wrapping_add(2));

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let eval_opts = EvalOptions { norm_mode: NormMode::Running };

    if cfg.epochs == 0 {
        return Ok(TrainOutcome { store, opt_state, log });
    }

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr)?;
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut total_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (mut batch, labels) = train_set.batch(chunk);
            if let Some(policy) = augment_policy {
                batch = augment(&batch, policy, &mut augment_rng)?;
            }
            let mut tape = Tape::new();
            let fwd = forward_full_tape(&mut tape, &store, &batch, true)?;
            let bundle = build_loss(&mut tape, &fwd, &labels, loss_cfg)?;
            if !bundle.total_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("loss became {}", bundle.total_value),
                });
            }
            total_sum += bundle.total_value;
            for (name, v) in &bundle.components {
                *loss_sums.entry(name).or_insert(0.0) += v;
            }
            tape.backward(bundle.total)?;
            let mut grads: BTreeMap<(NodeId, usize), Tensor<f32>> = BTreeMap::new();
            for (node, slot, var) in &fwd.param_vars {
                if let Some(g) = tape.grad(*var) {
                    grads
                        .entry((*node, *slot))
                        .and_modify(|t| {
                            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
            sgd_step(
                &mut store,
                &grads,
                &mut opt_state,
                &SgdHyper { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay },
            )?;
            store.update_norm_stats(&fwd.stat_updates, NORM_MOMENTUM)?;
            steps += 1;
        }

        let is_last = epoch + 1 == cfg.epochs;
        if epoch % cfg.eval_cadence == 0 || is_last {
            let summary = evaluate(&store, test_set, &eval_opts)?;
            let steps_f = steps.max(1) as f64;
            let comp = |name: &str| loss_sums.get(name).map(|v| v / steps_f);
            for (b, &acc) in summary.per_budget_accuracy.iter().enumerate() {
                log.rows.push(MetricRow {
                    epoch,
                    budget: b,
                    models: 1 << b,
                    accuracy: acc,
                    diversity: summary.diversity,
                    lr,
                    loss_total: total_sum / steps_f,
                    loss_independent: comp("independent"),
                    loss_structured: comp("structured"),
                    loss_codistill: comp("codistill"),
                    loss_hierarchical: comp("hierarchical"),
                });
            }
        }
        if let Some(dir) = out_dir {
            let periodic = cfg.checkpoint_cadence > 0 && (epoch + 1) % cfg.checkpoint_cadence == 0;
            if periodic {
                let path = dir.join(format!("checkpoint_epoch{epoch:04}.bin"));
                checkpoint::save_checkpoint(&store, Some(&opt_state), &path)?;
            }
            if is_last {
                checkpoint::save_checkpoint(
                    &store,
                    Some(&opt_state),
                    &dir.join("checkpoint_final.bin"),
                )?;
            }
        }
    }
    Ok(TrainOutcome { store, opt_state, log })
}

/// Write a metrics CSV next to the run's other outputs.
pub fn write_metrics(log: &MetricLog, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
}
