use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{Gradients, MlpModel, ParamId, TrainableMask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{section}.{key}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        Ok(())
    }
}

/// Velocity buffers, created lazily per tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumState {
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl MomentumState {
    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }
}

/// One SGD step on the trainable tensors:
/// `g ← grad + decay·θ` (decayed kinds only), `v ← μ·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step(
    model: &mut MlpModel,
    gradients: &Gradients,
    state: &mut MomentumState,
    cfg: &SgdConfig,
    mask: &TrainableMask,
) -> Result<()> {
    for id in mask.iter() {
        let grad = gradients
            .get(id)
            .ok_or_else(|| Error::Mask(format!("no gradient for {id}")))?;
        let theta = model
            .param_mut(id)
            .ok_or_else(|| Error::Mask(format!("{id} does not exist in the model")))?;
        if grad.len() != theta.len() {
            return Err(Error::shape(
                format!("gradient for {id}"),
                theta.len(),
                grad.len(),
            ));
        }
        let v = state
            .velocity
            .entry(id)
            .or_insert_with(|| vec![0.0; theta.len()]);
        let decay = if id.kind.decays() {
            cfg.weight_decay
        } else {
            0.0
        };
        for ((t, &g), vi) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = if decay > 0.0 { g + decay * *t } else { g };
            *vi = cfg.momentum * *vi + g;
            *t -= cfg.lr * *vi;
        }
    }
    Ok(())
}
