//! Training objectives.
//!
//! Four objectives are supported, all reducing with a mean over samples and
//! a sum over models or budget levels:
//!
//! - independent: every member fits the labels on its own;
//! - structured: every prefix ensemble y^b fits the labels;
//! - co-distillation: members additionally fit temperature-softened full-
//!   ensemble outputs (raises member accuracy, collapses diversity);
//! - hierarchical distillation: prefix ensembles below the full budget fit
//!   the softened full-ensemble outputs, leaving members free to disagree.
//!
//! Distillation teachers are wrapped in stop-gradient, so the loss gradient
//! equals what it would be if the teacher were a constant tensor.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::TapeForward;
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Independent,
    Structured,
    Codistill,
    Hierarchical,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub objective: Objective,
    /// Mixing weight between the label term and the distillation term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Soft-label temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Multiply the soft cross-entropy by T^2 (off by default).
    #[serde(default)]
    pub t_squared_rescale: bool,
    /// Mix the structured objective with the independent one instead of
    /// running it alone.
    #[serde(default)]
    pub structured_mix: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Independent,
            alpha: default_alpha(),
            temperature: default_temperature(),
            t_squared_rescale: false,
            structured_mix: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument {
                op: "LossConfig",
                message: format!("alpha must lie in [0, 1], got {}", self.alpha),
            });
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument {
                op: "LossConfig",
                message: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        Ok(())
    }
}

/// A scalar objective together with its named components.
pub struct LossBundle {
    pub total: Var,
    pub total_value: f64,
    /// Component values: ("independent", "structured", "codistill",
    /// "hierarchical") as applicable.
    pub components: Vec<(&'static str, f64)>,
}

impl LossBundle {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// Sum over members of the per-member cross-entropy (mean over the batch).
/// Requires the full ensemble.
pub fn loss_independent<E: Elem>(
    tape: &mut Tape<E>,
    per_leaf: &[Var],
    labels: &[usize],
    expected_models: usize,
) -> Result<Var> {
    if per_leaf.len() != expected_models {
        return Err(Error::PartialEnsemble { got: per_leaf.len(), expected: expected_models });
    }
    let terms: Vec<Var> = per_leaf
        .iter()
        .map(|&leaf| tape.cross_entropy_hard(leaf, labels))
        .collect::<Result<_>>()?;
    tape.sum_vars(&terms)
}

/// Sum over budget levels of the prefix-ensemble cross-entropy.
pub fn loss_structured<E: Elem>(
    tape: &mut Tape<E>,
    prefixes: &[Var],
    labels: &[usize],
    expected_levels: usize,
) -> Result<Var> {
    if prefixes.len() != expected_levels {
        return Err(Error::PartialEnsemble { got: prefixes.len(), expected: expected_levels });
    }
    let terms: Vec<Var> = prefixes
        .iter()
        .map(|&p| tape.cross_entropy_hard(p, labels))
        .collect::<Result<_>>()?;
    tape.sum_vars(&terms)
}

/// Temperature-softened full-ensemble output under stop-gradient.
fn make_teacher<E: Elem>(tape: &mut Tape<E>, ensemble: Var, cfg: &LossConfig) -> Result<Var> {
    let probs = tape.softmax_stable(ensemble, cfg.temperature)?;
    Ok(tape.stop_gradient(probs))
}

/// `(1 - alpha) * independent + alpha * sum_n soft-CE(member_n, teacher)`.
pub fn loss_codistill<E: Elem>(
    tape: &mut Tape<E>,
    per_leaf: &[Var],
    labels: &[usize],
    cfg: &LossConfig,
    expected_models: usize,
) -> Result<LossBundle> {
    cfg.validate()?;
    let li = loss_independent(tape, per_leaf, labels, expected_models)?;
    let ensemble = tape.mean_stack(per_leaf)?;
    let teacher = make_teacher(tape, ensemble, cfg)?;
    let terms: Vec<Var> = per_leaf
        .iter()
        .map(|&leaf| tape.cross_entropy_soft(leaf, teacher, cfg.temperature, cfg.t_squared_rescale))
        .collect::<Result<_>>()?;
    let ld = tape.sum_vars(&terms)?;
    let total = tape.add_scaled(li, ld, E::from_f64(1.0 - cfg.alpha), E::from_f64(cfg.alpha))?;
    Ok(LossBundle {
        total,
        total_value: tape.value(total).item().to_f64(),
        components: alloc::vec![
            ("independent", tape.value(li).item().to_f64()),
            ("codistill", tape.value(ld).item().to_f64()),
        ],
    })
}

/// `(1 - alpha) * independent + alpha * sum_{b < B} soft-CE(y^b, teacher)`.
/// The b = B term is excluded: it would distill the full output onto itself.
pub fn loss_hierarchical_distill<E: Elem>(
    tape: &mut Tape<E>,
    prefixes: &[Var],
    per_leaf: &[Var],
    labels: &[usize],
    cfg: &LossConfig,
    depth: usize,
) -> Result<LossBundle> {
    cfg.validate()?;
    if prefixes.len() != depth + 1 {
        return Err(Error::PartialEnsemble { got: prefixes.len(), expected: depth + 1 });
    }
    let li = loss_independent(tape, per_leaf, labels, 1 << depth)?;
    let lhd = if depth == 0 {
        tape.leaf(Tensor::scalar(E::ZERO))
    } else {
        let teacher = make_teacher(tape, prefixes[depth], cfg)?;
        let terms: Vec<Var> = prefixes[..depth]
            .iter()
            .map(|&p| tape.cross_entropy_soft(p, teacher, cfg.temperature, cfg.t_squared_rescale))
            .collect::<Result<_>>()?;
        tape.sum_vars(&terms)?
    };
    let total = tape.add_scaled(li, lhd, E::from_f64(1.0 - cfg.alpha), E::from_f64(cfg.alpha))?;
    Ok(LossBundle {
        total,
        total_value: tape.value(total).item().to_f64(),
        components: alloc::vec![
            ("independent", tape.value(li).item().to_f64()),
            ("hierarchical", tape.value(lhd).item().to_f64()),
        ],
    })
}

/// Build the configured objective from a recorded forward pass.
pub fn build_loss<E: Elem>(
    tape: &mut Tape<E>,
    fwd: &TapeForward<E>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBundle> {
    cfg.validate()?;
    let models = 1 << fwd.depth;
    match cfg.objective {
        Objective::Independent => {
            let li = loss_independent(tape, &fwd.per_leaf, labels, models)?;
            Ok(LossBundle {
                total: li,
                total_value: tape.value(li).item().to_f64(),
                components: alloc::vec![("independent", tape.value(li).item().to_f64())],
            })
        }
        Objective::Structured => {
            let ls = loss_structured(tape, &fwd.prefixes, labels, fwd.depth + 1)?;
            if cfg.structured_mix {
                let li = loss_independent(tape, &fwd.per_leaf, labels, models)?;
                let total =
                    tape.add_scaled(li, ls, E::from_f64(1.0 - cfg.alpha), E::from_f64(cfg.alpha))?;
                Ok(LossBundle {
                    total,
                    total_value: tape.value(total).item().to_f64(),
                    components: alloc::vec![
                        ("independent", tape.value(li).item().to_f64()),
                        ("structured", tape.value(ls).item().to_f64()),
                    ],
                })
            } else {
                Ok(LossBundle {
                    total: ls,
                    total_value: tape.value(ls).item().to_f64(),
                    components: alloc::vec![("structured", tape.value(ls).item().to_f64())],
                })
            }
        }
        Objective::Codistill => loss_codistill(tape, &fwd.per_leaf, labels, cfg, models),
        Objective::Hierarchical => {
            loss_hierarchical_distill(tape, &fwd.prefixes, &fwd.per_leaf, labels, cfg, fwd.depth)
        }
    }
}

/// Population standard deviation of member logits per (sample, class),
/// averaged over classes and samples. Each entry of `per_leaf` is one
/// member's logits `[samples, classes]`.
pub fn diversity_logit_std<E: Elem>(per_leaf: &[Tensor<E>]) -> Result<f64> {
    if per_leaf.len() < 2 {
        return Err(Error::TooFewModels { got: per_leaf.len() });
    }
    let shape = per_leaf[0].shape().to_vec();
    for t in per_leaf {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "diversity_logit_std",
                axis: "elements",
                expected: per_leaf[0].numel(),
                got: t.numel(),
            });
        }
    }
    let n = per_leaf.len() as f64;
    let cells = per_leaf[0].numel();
    let mut acc = 0.0f64;
    for i in 0..cells {
        let mut mean = 0.0f64;
        for t in per_leaf {
            mean += t.data()[i].to_f64();
        }
        mean /= n;
        let mut var = 0.0f64;
        for t in per_leaf {
            let d = t.data()[i].to_f64() - mean;
            var += d * d;
        }
        acc += libm::sqrt(var / n);
    }
    Ok(acc / cells as f64)
}
