//! Dense networks with per-layer feature taps and manual backpropagation.
//!
//! A model is a flat list of [`Layer`]s ending in the classifier head. The
//! layers before the head form the feature network; the head maps its output
//! to class logits.

mod backward;
mod checkpoint;
mod gradcheck;
mod sgd;

pub use backward::{backward, BackwardOutput, BatchStats, Gradients};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use sgd::{sgd_step, MomentumState, SgdConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Dense {
            weights: Matrix::from_vec(outputs, inputs, data).expect("sized above"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// γ
    pub scale: Vec<f64>,
    /// β
    pub shift: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            scale: vec![1.0; width],
            shift: vec![0.0; width],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    /// Whether weight decay applies. Biases are exempt.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Bias)
    }
}

/// One parameter tensor: the layer it lives in and which of its tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
        };
        write!(f, "layer{}.{kind}", self.layer)
    }
}

/// Whether BatchNorm normalizes with batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    head_index: usize,
    /// Provenance of the parameters, e.g. `init:seed=3`, `erm:seed=3`.
    #[serde(default)]
    lineage: Vec<String>,
}

/// Logits plus one tap per ReLU output, with the logits appended as the last
/// tap.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub taps: Vec<Matrix>,
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let head_index = layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense(_)))
            .ok_or_else(|| Error::Config("model needs at least one Dense layer".into()))?;
        if head_index + 1 != layers.len() {
            return Err(Error::Config(
                "the classifier head must be the last layer".into(),
            ));
        }
        let model = MlpModel {
            layers,
            head_index,
            lineage: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    /// `Dense → [BatchNorm] → ReLU` per hidden width, then a Dense head.
    pub fn mlp<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        classes: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(Layer::Dense(Dense::init(width, h, rng)));
            if batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            }
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense(Dense::init(width, classes, rng)));
        MlpModel::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.bias.len() != d.outputs() {
                        return Err(Error::shape(
                            format!("layer {i} bias"),
                            d.outputs(),
                            d.bias.len(),
                        ));
                    }
                    if let Some(w) = width {
                        if w != d.inputs() {
                            return Err(Error::shape(format!("layer {i} input"), w, d.inputs()));
                        }
                    }
                    width = Some(d.outputs());
                }
                Layer::BatchNorm(bn) => {
                    let n = bn.width();
                    if [bn.shift.len(), bn.running_mean.len(), bn.running_var.len()]
                        .iter()
                        .any(|&l| l != n)
                    {
                        return Err(Error::shape(
                            format!("layer {i} batchnorm tensors"),
                            n,
                            "mixed",
                        ));
                    }
                    if let Some(w) = width {
                        if w != n {
                            return Err(Error::shape(format!("layer {i} input"), w, n));
                        }
                    }
                    if bn.epsilon <= 0.0 || bn.running_var.iter().any(|&v| v < 0.0) {
                        return Err(Error::Config(format!(
                            "layer {i}: batchnorm needs epsilon > 0 and running_var >= 0"
                        )));
                    }
                    width = Some(n);
                }
                Layer::Relu => {}
            }
        }
        match self.layers.last() {
            Some(Layer::Dense(_)) if self.head_index + 1 == self.layers.len() => Ok(()),
            _ => Err(Error::Config(
                "the last layer must be the Dense head".into(),
            )),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head_index(&self) -> usize {
        self.head_index
    }

    pub fn head(&self) -> &Dense {
        match &self.layers[self.head_index] {
            Layer::Dense(d) => d,
            _ => unreachable!("head is always Dense"),
        }
    }

    pub fn lineage(&self) -> &[String] {
        &self.lineage
    }

    pub fn push_lineage(&mut self, entry: impl Into<String>) {
        self.lineage.push(entry.into());
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.inputs()),
                _ => None,
            })
            .expect("validated model has a Dense layer")
    }

    pub fn classes(&self) -> usize {
        self.head().outputs()
    }

    /// Width of the representation fed into the head.
    pub fn penultimate_dim(&self) -> usize {
        self.head().inputs()
    }

    /// Widths of the taps returned by [`forward_with_taps`](Self::forward_with_taps).
    pub fn tap_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        let mut width = self.input_dim();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => width = d.outputs(),
                Layer::BatchNorm(_) => {}
                Layer::Relu => widths.push(width),
            }
        }
        widths.push(self.classes());
        widths
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Every parameter tensor in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense(_) => {
                    ids.push(ParamId {
                        layer,
                        kind: ParamKind::Weight,
                    });
                    ids.push(ParamId {
                        layer,
                        kind: ParamKind::Bias,
                    });
                }
                Layer::BatchNorm(_) => {
                    ids.push(ParamId {
                        layer,
                        kind: ParamKind::Gamma,
                    });
                    ids.push(ParamId {
                        layer,
                        kind: ParamKind::Beta,
                    });
                }
                Layer::Relu => {}
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        match (self.layers.get(id.layer)?, id.kind) {
            (Layer::Dense(d), ParamKind::Weight) => Some(d.weights.as_slice()),
            (Layer::Dense(d), ParamKind::Bias) => Some(&d.bias),
            (Layer::BatchNorm(b), ParamKind::Gamma) => Some(&b.scale),
            (Layer::BatchNorm(b), ParamKind::Beta) => Some(&b.shift),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        match (self.layers.get_mut(id.layer)?, id.kind) {
            (Layer::Dense(d), ParamKind::Weight) => Some(d.weights.as_mut_slice()),
            (Layer::Dense(d), ParamKind::Bias) => Some(&mut d.bias),
            (Layer::BatchNorm(b), ParamKind::Gamma) => Some(&mut b.scale),
            (Layer::BatchNorm(b), ParamKind::Beta) => Some(&mut b.shift),
            _ => None,
        }
    }

    /// Replaces the classifier head. Its input width must match the
    /// penultimate representation.
    pub fn replace_head(&mut self, head: Dense) -> Result<()> {
        if head.inputs() != self.penultimate_dim() {
            return Err(Error::shape(
                "replace_head",
                self.penultimate_dim(),
                head.inputs(),
            ));
        }
        self.layers[self.head_index] = Layer::Dense(head);
        Ok(())
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward input",
                format!("n x {}", self.input_dim()),
                format!("{} x {}", batch.rows(), batch.cols()),
            ));
        }
        Ok(())
    }

    /// Runs the network and returns the logits together with every ReLU
    /// output (and the logits as the final tap). In `Train` mode BatchNorm
    /// uses batch statistics; running statistics are only changed by
    /// [`update_running_stats`](Self::update_running_stats).
    pub fn forward_with_taps(&self, batch: &Matrix, mode: Mode) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut taps = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense(d) => x.affine_transposed(&d.weights, &d.bias),
                Layer::BatchNorm(bn) => batch_norm_forward(bn, &x, mode).out,
                Layer::Relu => {
                    let mut y = x;
                    y.map_inplace(|v| v.max(0.0));
                    taps.push(y.clone());
                    y
                }
            };
        }
        taps.push(x.clone());
        Ok(ForwardOutput { logits: x, taps })
    }

    pub fn logits(&self, batch: &Matrix, mode: Mode) -> Result<Matrix> {
        Ok(self.forward_with_taps(batch, mode)?.logits)
    }

    /// Output of the layer just before the head.
    pub fn penultimate(&self, batch: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers[..self.head_index] {
            x = match layer {
                Layer::Dense(d) => x.affine_transposed(&d.weights, &d.bias),
                Layer::BatchNorm(bn) => batch_norm_forward(bn, &x, mode).out,
                Layer::Relu => {
                    let mut y = x;
                    y.map_inplace(|v| v.max(0.0));
                    y
                }
            };
        }
        Ok(x)
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(batch, Mode::Inference)?.argmax_rows())
    }

    /// Folds batch statistics from a training step into the running
    /// estimates: `r ← (1 − m)·r + m·batch`.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            if let Some(Layer::BatchNorm(bn)) = self.layers.get_mut(s.layer) {
                let m = bn.momentum;
                for (r, &b) in bn.running_mean.iter_mut().zip(&s.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, &b) in bn.running_var.iter_mut().zip(&s.var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }
}

pub(crate) struct BnForward {
    pub out: Matrix,
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Population (biased) batch variance in `Train`, running statistics
/// otherwise.
pub(crate) fn batch_norm_forward(bn: &BatchNorm, x: &Matrix, mode: Mode) -> BnForward {
    let (n, w) = x.shape();
    let (mean, var) = match mode {
        Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
        Mode::Train => {
            let mut mean = vec![0.0; w];
            let mut var = vec![0.0; w];
            if n > 0 {
                mean = x.column_sums().into_iter().map(|s| s / n as f64).collect();
                for i in 0..n {
                    for (j, v) in x.row(i).iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect();
    let mut normalized = Matrix::zeros(n, w);
    let mut out = Matrix::zeros(n, w);
    for i in 0..n {
        for j in 0..w {
            let xh = (x[(i, j)] - mean[j]) * inv_std[j];
            normalized[(i, j)] = xh;
            out[(i, j)] = bn.scale[j] * xh + bn.shift[j];
        }
    }
    BnForward {
        out,
        normalized,
        inv_std,
        mean,
        var,
    }
}

/// The set of parameter tensors that receive updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    flags: BTreeSet<ParamId>,
}

impl TrainableMask {
    pub fn new(model: &MlpModel, ids: impl IntoIterator<Item = ParamId>) -> Result<Self> {
        let mask = TrainableMask {
            flags: ids.into_iter().collect(),
        };
        mask.validate(model)?;
        Ok(mask)
    }

    pub fn all(model: &MlpModel) -> Self {
        TrainableMask {
            flags: model.param_ids().into_iter().collect(),
        }
    }

    pub fn head_only(model: &MlpModel) -> Self {
        let layer = model.head_index();
        TrainableMask {
            flags: [ParamKind::Weight, ParamKind::Bias]
                .into_iter()
                .map(|kind| ParamId { layer, kind })
                .collect(),
        }
    }

    /// BatchNorm scale and shift tensors plus the head.
    pub fn affine_and_head(model: &MlpModel) -> Result<Self> {
        if !model.has_batch_norm() {
            return Err(Error::NoBatchNorm);
        }
        let mut mask = Self::head_only(model);
        for id in model.param_ids() {
            if matches!(id.kind, ParamKind::Gamma | ParamKind::Beta) {
                mask.flags.insert(id);
            }
        }
        Ok(mask)
    }

    pub fn validate(&self, model: &MlpModel) -> Result<()> {
        if self.flags.is_empty() {
            return Err(Error::Mask("no tensor is trainable".into()));
        }
        if let Some(bad) = self.flags.iter().find(|id| model.param(**id).is_none()) {
            return Err(Error::Mask(format!("{bad} does not exist in the model")));
        }
        Ok(())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.flags.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.flags.iter().copied()
    }

    /// Lowest layer index holding a trainable tensor.
    pub fn first_layer(&self) -> usize {
        self.flags.iter().map(|id| id.layer).min().unwrap_or(0)
    }
}

/// Parameter tensors whose values differ between two models of identical
/// architecture, compared bit for bit.
pub fn changed_params(before: &MlpModel, after: &MlpModel) -> Vec<ParamId> {
    before
        .param_ids()
        .into_iter()
        .filter(|&id| {
            let a = before.param(id).unwrap_or(&[]);
            let b = after.param(id).unwrap_or(&[]);
            a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .collect()
}
