//! Central finite-difference verification of [`backward`].

use super::{backward, Layer, MlpModel, Mode, ParamId, TrainableMask};
use crate::matrix::Matrix;

const STEP: f64 = 1e-4;
/// Differences below this are treated as agreement regardless of scale.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub id: ParamId,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved a ReLU input across
    /// zero.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn loss_of(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[usize],
    mask: &TrainableMask,
    mode: Mode,
    decay: f64,
) -> f64 {
    backward(model, batch, labels, mask, mode, decay)
        .expect("inputs validated by the analytic pass")
        .loss
}

/// Sign pattern of every ReLU input.
fn relu_pattern(model: &MlpModel, batch: &Matrix, mode: Mode) -> Vec<bool> {
    let mut pattern = Vec::new();
    let mut x = batch.clone();
    for layer in model.layers() {
        x = match layer {
            Layer::Dense(d) => x.affine_transposed(&d.weights, &d.bias),
            Layer::BatchNorm(bn) => super::batch_norm_forward(bn, &x, mode).out,
            Layer::Relu => {
                pattern.extend(x.as_slice().iter().map(|&v| v > 0.0));
                let mut y = x;
                y.map_inplace(|v| v.max(0.0));
                y
            }
        };
    }
    pattern
}

/// Compares analytic gradients of every parameter tensor against central
/// differences with step `1e-4`. A coordinate is excluded when the `±step`
/// perturbations see different ReLU activation patterns.
pub fn grad_check(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[usize],
    mode: Mode,
    weight_decay: f64,
    tolerance: f64,
) -> crate::Result<GradCheckReport> {
    let mask = TrainableMask::all(model);
    let analytic = backward(model, batch, labels, &mask, mode, weight_decay)?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for id in model.param_ids() {
        let grad = analytic
            .gradients
            .get(id)
            .expect("all tensors present")
            .to_vec();
        let mut check = TensorCheck {
            id,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for (k, &a) in grad.iter().enumerate() {
            let original = probe.param(id).expect("model tensor")[k];
            probe.param_mut(id).expect("model tensor")[k] = original + STEP;
            let plus_pattern = relu_pattern(&probe, batch, mode);
            let plus = loss_of(&probe, batch, labels, &mask, mode, weight_decay);
            probe.param_mut(id).expect("model tensor")[k] = original - STEP;
            let minus_pattern = relu_pattern(&probe, batch, mode);
            let minus = loss_of(&probe, batch, labels, &mask, mode, weight_decay);
            probe.param_mut(id).expect("model tensor")[k] = original;

            if plus_pattern != minus_pattern {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let abs = (a - numeric).abs();
            let rel = if abs <= ABS_FLOOR {
                0.0
            } else {
                abs / a.abs().max(numeric.abs())
            };
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors, tolerance })
}
