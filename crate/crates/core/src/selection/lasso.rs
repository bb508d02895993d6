use rand::Rng;

use crate::data::{balanced_batches, shuffled_batches};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    backward, sgd_step, Dense, Layer, MlpModel, Mode, MomentumState, ParamId, ParamKind, SgdConfig,
    TrainableMask,
};

/// `Σ_i ‖W[:,i]‖₂` and its subgradient, taken as 0 for an all-zero column.
pub fn group_lasso_penalty(weights: &Matrix) -> (f64, Matrix) {
    let (c, d) = weights.shape();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(c, d);
    for i in 0..d {
        let norm = (0..c).map(|k| weights[(k, i)].powi(2)).sum::<f64>().sqrt();
        value += norm;
        if norm > 0.0 {
            for k in 0..c {
                grad[(k, i)] = weights[(k, i)] / norm;
            }
        }
    }
    (value, grad)
}

/// Minibatch construction for head training.
#[derive(Clone, Copy, Debug)]
pub enum Batching<'a> {
    /// Plain shuffled batches.
    Shuffled,
    /// Group-stratified batches over the given per-row group indices.
    Balanced {
        groups: &'a [usize],
        num_groups: usize,
    },
}

#[derive(Clone, Debug)]
pub struct HeadTraining {
    pub head: Dense,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a linear softmax head on fixed features by SGD, minimizing mean
/// cross-entropy plus `lambda·Σ_i ‖W[:,i]‖₂`. The bias is not penalized.
pub fn train_linear_head<R: Rng + ?Sized>(
    features: &Matrix,
    labels: &[usize],
    batching: Batching<'_>,
    cfg: &SgdConfig,
    lambda: f64,
    init: Dense,
    rng: &mut R,
) -> Result<HeadTraining> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "selection.lambda: {lambda} must be >= 0"
        )));
    }
    if init.inputs() != features.cols() {
        return Err(Error::shape("head input", features.cols(), init.inputs()));
    }
    cfg.validate("head")?;
    let mut model = MlpModel::new(vec![Layer::Dense(init)])?;
    let mask = TrainableMask::all(&model);
    let weight_id = ParamId {
        layer: 0,
        kind: ParamKind::Weight,
    };
    let mut state = MomentumState::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let batches = match batching {
            Batching::Shuffled => shuffled_batches(features.rows(), cfg.batch_size, rng),
            Batching::Balanced { groups, num_groups } => {
                balanced_batches(groups, num_groups, cfg.batch_size, rng)
            }
        };
        let mut total = 0.0;
        for batch in &batches {
            let x = features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut out = backward(&model, &x, &y, &mask, Mode::Train, 0.0)?;
            if lambda > 0.0 {
                let (value, sub) = group_lasso_penalty(&model.head().weights);
                out.loss += lambda * value;
                let g = out.gradients.get_mut(weight_id).expect("head weight");
                for (gi, s) in g.iter_mut().zip(sub.as_slice()) {
                    *gi += lambda * s;
                }
            }
            sgd_step(&mut model, &out.gradients, &mut state, cfg, &mask)?;
            total += out.loss;
        }
        epoch_losses.push(if batches.is_empty() {
            0.0
        } else {
            total / batches.len() as f64
        });
    }
    Ok(HeadTraining {
        head: model.head().clone(),
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn closed_form_single_column() {
        let w = Matrix::from_rows(&[[3.0], [4.0]]);
        let (v, g) = group_lasso_penalty(&w);
        assert_eq!(v, 5.0);
        assert!((g[(0, 0)] - 0.6).abs() < 1e-15 && (g[(1, 0)] - 0.8).abs() < 1e-15);
        let lambda = 1e-5;
        assert!((lambda * v - 5.0 * lambda).abs() < 1e-20);
    }

    #[test]
    fn zero_column_has_zero_subgradient() {
        let w = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let (v, g) = group_lasso_penalty(&w);
        assert_eq!(v, 1.0);
        assert_eq!(g.column(0), vec![0.0, 0.0]);
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut rng = stream_rng(0, Stream::Selection);
        let init = Dense::init(2, 2, &mut rng);
        let cfg = SgdConfig {
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.0,
            epochs: 1,
            batch_size: 2,
        };
        let err = train_linear_head(
            &Matrix::zeros(2, 2),
            &[0, 1],
            Batching::Shuffled,
            &cfg,
            -1.0,
            init,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn strong_penalty_shrinks_irrelevant_columns() {
        // feature 0 carries the label, feature 1 is noise
        let mut rng = stream_rng(3, Stream::Selection);
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            data.push(if y == 1 { 1.0 } else { -1.0 } + rng.random_range(-0.1..0.1));
            data.push(rng.random_range(-1.0..1.0));
            labels.push(y);
        }
        let x = Matrix::from_vec(n, 2, data).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            epochs: 30,
            batch_size: 20,
        };
        let init = Dense::init(2, 2, &mut rng);
        let t =
            train_linear_head(&x, &labels, Batching::Shuffled, &cfg, 0.05, init, &mut rng).unwrap();
        let s = crate::selection::relevance_scores(&t.head.weights);
        assert!(s[0] > 5.0 * s[1], "{s:?}");
    }
}
