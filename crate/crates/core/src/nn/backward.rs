use std::collections::BTreeMap;

use super::{batch_norm_forward, Layer, MlpModel, Mode, ParamId, ParamKind, TrainableMask};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Batch mean and variance seen by one BatchNorm layer during a `Train`
/// forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradient tensors keyed by parameter, one entry per model tensor.
/// Entries for untrainable tensors are all zeros.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Gradients {
    tensors: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let tensors = model
            .param_ids()
            .into_iter()
            .map(|id| (id, vec![0.0; model.param(id).map_or(0, <[f64]>::len)]))
            .collect();
        Gradients { tensors }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.tensors.get(&id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.tensors.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.tensors.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    /// Mean cross-entropy plus `0.5·decay·‖θ‖²` over trainable decayed tensors.
    pub loss: f64,
    pub gradients: Gradients,
    pub batch_stats: Vec<BatchStats>,
}

enum Cache {
    Dense {
        input: Matrix,
    },
    BatchNorm {
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Matrix,
    },
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (n, c) = logits.shape();
    let mut grad = Matrix::zeros(n, c);
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        let g = grad.row_mut(i);
        for j in 0..c {
            g[j] = ((row[j] - log_z).exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Gradients of mean softmax cross-entropy (plus an L2 decay term when
/// `weight_decay > 0`) for the tensors flagged in `mask`. Backpropagation
/// stops at the lowest trainable layer.
pub fn backward(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[usize],
    mask: &TrainableMask,
    mode: Mode,
    weight_decay: f64,
) -> Result<BackwardOutput> {
    mask.validate(model)?;
    model.check_input(batch)?;
    if labels.len() != batch.rows() {
        return Err(Error::shape("labels", batch.rows(), labels.len()));
    }
    let classes = model.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }

    let mut caches = Vec::with_capacity(model.layers.len());
    let mut batch_stats = Vec::new();
    let mut x = batch.clone();
    for (idx, layer) in model.layers.iter().enumerate() {
        x = match layer {
            Layer::Dense(d) => {
                let y = x.affine_transposed(&d.weights, &d.bias);
                caches.push(Cache::Dense { input: x });
                y
            }
            Layer::BatchNorm(bn) => {
                let f = batch_norm_forward(bn, &x, mode);
                if mode == Mode::Train {
                    batch_stats.push(BatchStats {
                        layer: idx,
                        mean: f.mean,
                        var: f.var,
                    });
                }
                caches.push(Cache::BatchNorm {
                    normalized: f.normalized,
                    inv_std: f.inv_std,
                });
                f.out
            }
            Layer::Relu => {
                let mut y = x.clone();
                y.map_inplace(|v| v.max(0.0));
                caches.push(Cache::Relu { input: x });
                y
            }
        };
    }

    let (mut loss, mut upstream) = softmax_cross_entropy(&x, labels);
    let mut gradients = Gradients::zeros_like(model);
    let stop = mask.first_layer();
    let n = batch.rows() as f64;

    for idx in (stop..model.layers.len()).rev() {
        let need_input_grad = idx > stop;
        match (&model.layers[idx], &caches[idx]) {
            (Layer::Dense(d), Cache::Dense { input }) => {
                let w_id = ParamId {
                    layer: idx,
                    kind: ParamKind::Weight,
                };
                let b_id = ParamId {
                    layer: idx,
                    kind: ParamKind::Bias,
                };
                if mask.contains(w_id) {
                    let gw = upstream.transpose_matmul(input);
                    *gradients.get_mut(w_id).expect("dense weight") = gw.into_vec();
                }
                if mask.contains(b_id) {
                    *gradients.get_mut(b_id).expect("dense bias") = upstream.column_sums();
                }
                if need_input_grad {
                    upstream = upstream.matmul(&d.weights);
                }
            }
            (
                Layer::BatchNorm(bn),
                Cache::BatchNorm {
                    normalized,
                    inv_std,
                },
            ) => {
                let g_id = ParamId {
                    layer: idx,
                    kind: ParamKind::Gamma,
                };
                let b_id = ParamId {
                    layer: idx,
                    kind: ParamKind::Beta,
                };
                let w = bn.width();
                let rows = upstream.rows();
                let mut d_gamma = vec![0.0; w];
                let mut d_beta = vec![0.0; w];
                for i in 0..rows {
                    for j in 0..w {
                        d_gamma[j] += upstream[(i, j)] * normalized[(i, j)];
                        d_beta[j] += upstream[(i, j)];
                    }
                }
                if need_input_grad {
                    let mut dx = Matrix::zeros(rows, w);
                    match mode {
                        Mode::Inference => {
                            for i in 0..rows {
                                for j in 0..w {
                                    dx[(i, j)] = upstream[(i, j)] * bn.scale[j] * inv_std[j];
                                }
                            }
                        }
                        Mode::Train => {
                            // dx = inv_std/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = dy·γ
                            let mut sum_dxh = vec![0.0; w];
                            let mut sum_dxh_xh = vec![0.0; w];
                            for i in 0..rows {
                                for j in 0..w {
                                    let dxh = upstream[(i, j)] * bn.scale[j];
                                    sum_dxh[j] += dxh;
                                    sum_dxh_xh[j] += dxh * normalized[(i, j)];
                                }
                            }
                            for i in 0..rows {
                                for j in 0..w {
                                    let dxh = upstream[(i, j)] * bn.scale[j];
                                    dx[(i, j)] = inv_std[j] / n
                                        * (n * dxh
                                            - sum_dxh[j]
                                            - normalized[(i, j)] * sum_dxh_xh[j]);
                                }
                            }
                        }
                    }
                    upstream = dx;
                }
                if mask.contains(g_id) {
                    *gradients.get_mut(g_id).expect("bn gamma") = d_gamma;
                }
                if mask.contains(b_id) {
                    *gradients.get_mut(b_id).expect("bn beta") = d_beta;
                }
            }
            (Layer::Relu, Cache::Relu { input }) => {
                if need_input_grad {
                    for (g, &x) in upstream.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
            }
            _ => unreachable!("cache mirrors layers"),
        }
    }

    if weight_decay > 0.0 {
        for id in mask.iter().filter(|id| id.kind.decays()) {
            let theta = model.param(id).expect("validated mask");
            let g = gradients.get_mut(id).expect("validated mask");
            for (gi, &t) in g.iter_mut().zip(theta) {
                *gi += weight_decay * t;
                loss += 0.5 * weight_decay * t * t;
            }
        }
    }

    Ok(BackwardOutput {
        loss,
        gradients,
        batch_stats,
    })
}
