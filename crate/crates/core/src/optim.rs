//! SGD with momentum and coupled weight decay, plus the cosine learning-rate
//! schedule.
//!
//! The velocity update is `v <- momentum * v + grad + wd * param` followed by
//! `param <- param - lr * v`. Weight decay enters the gradient (coupled
//! form) and is skipped for normalization scale/shift parameters and for
//! running statistics.

use alloc::collections::BTreeMap;
use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use crate::tree::{NodeId, ParamStore};

/// Cosine schedule: `0.5 * lr0 * (1 + cos(pi * t / total))`, monotone
/// non-increasing from `lr0` at t = 0.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument {
            op: "cosine_lr",
            message: format!("epoch {epoch} out of range 0..{total_epochs}"),
        });
    }
    let phase = core::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(0.5 * lr0 * (1.0 + libm::cos(phase)))
}

/// Per-parameter momentum buffers, keyed like the store's parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<E: Elem> {
    pub velocity: BTreeMap<(NodeId, usize), Tensor<E>>,
}

impl<E: Elem> SgdState<E> {
    pub fn new() -> Self {
        Self { velocity: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One update on a single tensor. `weight_decay` must already reflect
/// whether this parameter is decayed.
pub fn sgd_step_tensor<E: Elem>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    velocity: &mut Tensor<E>,
    hp: &SgdHyper,
) {
    let lr = E::from_f64(hp.lr);
    let momentum = E::from_f64(hp.momentum);
    let wd = E::from_f64(hp.weight_decay);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data().iter())
        .zip(velocity.data_mut().iter_mut())
    {
        *v = momentum * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// One update over every trainable parameter in the store. Parameters
/// without a gradient entry are treated as having a zero gradient. A
/// non-finite gradient aborts with the offending parameter's name before
/// anything is mutated.
pub fn sgd_step<E: Elem>(
    store: &mut ParamStore<E>,
    grads: &BTreeMap<(NodeId, usize), Tensor<E>>,
    state: &mut SgdState<E>,
    hp: &SgdHyper,
) -> Result<()> {
    for ((node, slot), g) in grads.iter() {
        if !g.all_finite() {
            let name = store
                .node(*node)
                .and_then(|np| np.slots.get(*slot))
                .map(|p| format!("{}/{}", node, p.name))
                .unwrap_or_else(|| format!("{node}/slot{slot}"));
            return Err(Error::NonFiniteGradient { param: name });
        }
    }
    for (node, slot, param) in store.params_mut() {
        if !param.kind.trainable() {
            continue;
        }
        let velocity = state
            .velocity
            .entry((node, slot))
            .or_insert_with(|| Tensor::zeros(param.value.shape()));
        let zero;
        let grad = match grads.get(&(node, slot)) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(param.value.shape());
                &zero
            }
        };
        let hp_here = SgdHyper {
            weight_decay: if param.kind.weight_decayed() { hp.weight_decay } else { 0.0 },
            ..*hp
        };
        sgd_step_tensor(&mut param.value, grad, velocity, &hp_here);
    }
    Ok(())
}
