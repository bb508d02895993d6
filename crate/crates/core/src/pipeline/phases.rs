//! The individual training phases and the classifiers they produce.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::config::{
    DataSource, ModelConfig, RetrainConfig, RunConfig, SelectionConfig, SelectionData,
};
use super::metrics::{evaluate_predictions, GroupMetrics};
use crate::data::{balanced_subset, generate, load_csv, shuffled_batches, GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::exec::{Execution, DEFAULT_CHUNK_ROWS};
use crate::matrix::Matrix;
use crate::nn::{
    backward, sgd_step, Dense, MlpModel, Mode, MomentumState, SgdConfig, TrainableMask,
};
use crate::rng::{stream_rng, stream_rng_indexed, Stream};
use crate::selection::{
    apply_mask, relevance_scores, train_linear_head, Batching, FeatureBank, FeatureExtractor,
    Normalizer, SelectionResult,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: GroupedDataset,
    /// Validation split as loaded or generated.
    pub val: GroupedDataset,
    /// Group-balanced validation subset used by every balanced phase.
    pub val_rw: GroupedDataset,
    pub test: GroupedDataset,
}

/// Seed of the balanced subset used by retraining repeat `r`.
fn subset_seed(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_add((repeat as u64) << 32)
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let (train, val, test) = match cfg.data.source {
        DataSource::Synthetic => {
            let s = generate(&cfg.data.generator)?;
            (s.train, s.val, s.test)
        }
        DataSource::Csv => (
            load_csv(Path::new(&cfg.data.csv.train), Split::Train)?,
            load_csv(Path::new(&cfg.data.csv.val), Split::Val)?,
            load_csv(Path::new(&cfg.data.csv.test), Split::Test)?,
        ),
    };
    if train.dim() != val.dim() || train.dim() != test.dim() {
        return Err(Error::shape(
            "split feature widths",
            train.dim(),
            format!("{} / {}", val.dim(), test.dim()),
        ));
    }
    let val_rw = if val.is_balanced() {
        val.clone()
    } else {
        balanced_subset(&val, cfg.seed)?
    };
    Ok(Splits {
        train,
        val,
        val_rw,
        test,
    })
}

/// Balanced sets for each retraining repeat; the first is always `val_rw`.
pub fn retrain_sets(splits: &Splits, repeats: usize, seed: u64) -> Result<Vec<GroupedDataset>> {
    let mut sets = vec![splits.val_rw.clone()];
    for r in 1..repeats {
        sets.push(balanced_subset(&splits.val, subset_seed(seed, r))?);
    }
    Ok(sets)
}

pub fn init_model(cfg: &ModelConfig, inputs: usize, classes: usize, seed: u64) -> Result<MlpModel> {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut model = MlpModel::mlp(
        inputs,
        &cfg.hidden,
        classes.max(2),
        cfg.batch_norm,
        &mut rng,
    )?;
    model.push_lineage(format!("init:seed={seed}"));
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct ErmOutcome {
    pub model: MlpModel,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains every parameter on the (unbalanced) training split with shuffled
/// minibatches. BatchNorm running statistics track the batch statistics.
pub fn erm_finetune(
    mut model: MlpModel,
    train: &GroupedDataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<ErmOutcome> {
    cfg.validate("erm")?;
    let mask = TrainableMask::all(&model);
    let mut rng = stream_rng(seed, Stream::Erm);
    let mut state = MomentumState::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let x = train.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let out = backward(&model, &x, &y, &mask, Mode::Train, 0.0)?;
            model.update_running_stats(&out.batch_stats);
            sgd_step(&mut model, &out.gradients, &mut state, cfg, &mask)?;
            total += out.loss;
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    model.push_lineage(format!("erm:seed={seed},epochs={}", cfg.epochs));
    Ok(ErmOutcome {
        model,
        epoch_losses,
    })
}

fn require_balanced(data: &GroupedDataset) -> Result<()> {
    if !data.is_balanced() {
        return Err(Error::Unbalanced(data.group_stats().counts));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub model: MlpModel,
    pub epoch_losses: Vec<f64>,
}

/// Trains `repeats` fresh linear heads on the given balanced sets (head
/// init and batch order drawn from per-repeat streams) and averages them.
fn train_balanced_heads(
    banks: &[(Matrix, &GroupedDataset)],
    cfg: &RetrainConfig,
    seed: u64,
    warm: Option<&Dense>,
) -> Result<(Dense, Vec<f64>)> {
    let mut heads = Vec::with_capacity(banks.len());
    let mut losses = Vec::new();
    for (r, (features, set)) in banks.iter().enumerate() {
        let init = match warm {
            Some(w) => w.clone(),
            None => {
                let mut init_rng = stream_rng_indexed(seed, Stream::HeadInit, r as u64);
                Dense::init(features.cols(), set.classes().max(2), &mut init_rng)
            }
        };
        let mut rng = stream_rng_indexed(seed, Stream::Retrain, r as u64);
        let groups = set.groups();
        let batching = Batching::Balanced {
            groups: &groups,
            num_groups: set.num_groups(),
        };
        let t = train_linear_head(
            features,
            set.labels(),
            batching,
            &cfg.sgd(),
            0.0,
            init,
            &mut rng,
        )?;
        if r == 0 {
            losses = t.epoch_losses;
        }
        heads.push(t.head);
    }
    Ok((average_heads(&heads), losses))
}

fn average_heads(heads: &[Dense]) -> Dense {
    if heads.len() == 1 {
        return heads[0].clone();
    }
    let k = heads.len() as f64;
    let mut out = heads[0].clone();
    for h in &heads[1..] {
        for (a, b) in out
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(h.weights.as_slice())
        {
            *a += b;
        }
        for (a, b) in out.bias.iter_mut().zip(&h.bias) {
            *a += b;
        }
    }
    out.weights.map_inplace(|v| v / k);
    for b in &mut out.bias {
        *b /= k;
    }
    out
}

/// Folds `x ↦ (x − mean)/(std + ε)` into a head acting on raw features.
fn fold_normalizer(head: &Dense, norm: &Normalizer) -> Dense {
    let mut folded = head.clone();
    for c in 0..head.outputs() {
        let mut shift = 0.0;
        for j in 0..head.inputs() {
            let w = head.weights[(c, j)] / (norm.std[j] + crate::selection::NORMALIZER_EPSILON);
            folded.weights[(c, j)] = w;
            shift += w * norm.mean[j];
        }
        folded.bias[c] = head.bias[c] - shift;
    }
    folded
}

/// Classic last-layer retraining: the feature network and its BatchNorm
/// statistics stay frozen and a fresh head is trained on standardized
/// penultimate features of the balanced set. The standardization is folded
/// back into the returned head.
pub fn dfr_retrain(
    model: &MlpModel,
    sets: &[GroupedDataset],
    cfg: &RetrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<RetrainOutcome> {
    cfg.sgd().validate("dfr")?;
    let first = sets
        .first()
        .ok_or_else(|| Error::Config("no retraining set".into()))?;
    for s in sets {
        require_balanced(s)?;
    }
    let penultimate = |x: &Matrix| -> Result<Matrix> {
        let parts = exec
            .map_row_chunks(x, DEFAULT_CHUNK_ROWS, |c| {
                model.penultimate(&c, Mode::Inference)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::vstack(&parts, model.penultimate_dim()))
    };
    let raw0 = penultimate(first.features())?;
    let norm = Normalizer::fit(&raw0)?;
    let mut banks = vec![(norm.transform(&raw0), first)];
    for s in &sets[1..] {
        banks.push((norm.transform(&penultimate(s.features())?), s));
    }
    let (head, epoch_losses) = train_balanced_heads(&banks, cfg, seed, None)?;
    let mut out = model.clone();
    out.replace_head(fold_normalizer(&head, &norm))?;
    out.push_lineage(format!("dfr:seed={seed},epochs={}", cfg.epochs));
    Ok(RetrainOutcome {
        model: out,
        epoch_losses,
    })
}

/// Balanced retraining of the BatchNorm scale/shift tensors together with a
/// fresh head. Dense weights of the feature network and the running
/// statistics stay frozen.
pub fn affine_dfr(
    model: &MlpModel,
    val_rw: &GroupedDataset,
    cfg: &RetrainConfig,
    seed: u64,
) -> Result<RetrainOutcome> {
    let sgd = cfg.sgd();
    sgd.validate("dfr")?;
    let mut out = model.clone();
    let mask = TrainableMask::affine_and_head(&out)?;
    require_balanced(val_rw)?;
    let mut init_rng = stream_rng_indexed(seed, Stream::HeadInit, 0);
    out.replace_head(Dense::init(
        out.penultimate_dim(),
        out.classes(),
        &mut init_rng,
    ))?;
    let mut rng = stream_rng_indexed(seed, Stream::Retrain, 0);
    let groups = val_rw.groups();
    let mut state = MomentumState::default();
    let mut epoch_losses = Vec::with_capacity(sgd.epochs);
    for _ in 0..sgd.epochs {
        let batches =
            crate::data::balanced_batches(&groups, val_rw.num_groups(), sgd.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let x = val_rw.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| val_rw.labels()[i]).collect();
            let step = backward(&out, &x, &y, &mask, Mode::Inference, 0.0)?;
            sgd_step(&mut out, &step.gradients, &mut state, &sgd, &mask)?;
            total += step.loss;
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    out.push_lineage(format!("affine-dfr:seed={seed},epochs={}", sgd.epochs));
    Ok(RetrainOutcome {
        model: out,
        epoch_losses,
    })
}

/// Linear head over a column subset of the feature bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct H2tClassifier {
    pub extractor: FeatureExtractor,
    /// Selected bank columns, ascending.
    pub columns: Vec<usize>,
    pub head: Dense,
}

impl H2tClassifier {
    pub fn logits(&self, backbone: &MlpModel, x: &Matrix, exec: Execution) -> Result<Matrix> {
        let bank = self.extractor.transform(backbone, x, exec)?;
        let selected = bank.features.select_columns(&self.columns);
        Ok(selected.affine_transposed(&self.head.weights, &self.head.bias))
    }
}

#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub extractor: FeatureExtractor,
    /// Bank of the balanced validation subset.
    pub val_bank: FeatureBank,
    pub result: SelectionResult,
    pub lasso_head: Dense,
    pub epoch_losses: Vec<f64>,
}

/// Builds the all-layer bank (normalization fitted on `val_rw`), trains the
/// group-lasso head on the chosen selection set and keeps the top-τ
/// features by relevance score.
pub fn h2t_select(
    model: &MlpModel,
    splits: &Splits,
    cfg: &SelectionConfig,
    seed: u64,
    exec: Execution,
) -> Result<SelectionOutcome> {
    require_balanced(&splits.val_rw)?;
    let (extractor, val_bank) =
        FeatureExtractor::fit(model, splits.val_rw.features(), cfg.bank(), exec)?;
    let (bank, set) = match cfg.data {
        SelectionData::Balanced => (val_bank.clone(), &splits.val_rw),
        SelectionData::Train => (
            extractor.transform(model, splits.train.features(), exec)?,
            &splits.train,
        ),
        SelectionData::Val => (
            extractor.transform(model, splits.val.features(), exec)?,
            &splits.val,
        ),
    };
    let groups = set.groups();
    let batching = if cfg.data == SelectionData::Train || !set.is_balanced() {
        Batching::Shuffled
    } else {
        Batching::Balanced {
            groups: &groups,
            num_groups: set.num_groups(),
        }
    };
    let mut init_rng = stream_rng(seed, Stream::SelectionInit);
    let init = Dense::init(bank.width(), model.classes(), &mut init_rng);
    let mut rng = stream_rng(seed, Stream::Selection);
    let trained = train_linear_head(
        &bank.features,
        set.labels(),
        batching,
        &cfg.sgd(),
        cfg.lambda,
        init,
        &mut rng,
    )?;
    let scores = relevance_scores(&trained.head.weights);
    let result = SelectionResult::new(scores, cfg.tau, bank.spans.clone())?;
    Ok(SelectionOutcome {
        extractor,
        val_bank,
        result,
        lasso_head: trained.head,
        epoch_losses: trained.epoch_losses,
    })
}

/// Trains the final head on the selected columns of the balanced bank.
pub fn h2t_retrain(
    model: &MlpModel,
    selection: &SelectionOutcome,
    sets: &[GroupedDataset],
    cfg: &RetrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<(H2tClassifier, Vec<f64>)> {
    cfg.sgd().validate("dfr")?;
    let first = sets
        .first()
        .ok_or_else(|| Error::Config("no retraining set".into()))?;
    for s in sets {
        require_balanced(s)?;
    }
    let mask = &selection.result.mask;
    let columns = selection.result.selected();
    let mut banks = vec![(apply_mask(&selection.val_bank, mask)?.features, first)];
    for s in &sets[1..] {
        let bank = selection.extractor.transform(model, s.features(), exec)?;
        banks.push((apply_mask(&bank, mask)?.features, s));
    }
    let warm = cfg.warm_start.then(|| Dense {
        weights: selection.lasso_head.weights.select_columns(&columns),
        bias: selection.lasso_head.bias.clone(),
    });
    let (head, losses) = train_balanced_heads(&banks, cfg, seed, warm.as_ref())?;
    Ok((
        H2tClassifier {
            extractor: selection.extractor.clone(),
            columns,
            head,
        },
        losses,
    ))
}

/// A trained predictor: either a plain network or a backbone plus an
/// all-layer head.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Network(MlpModel),
    H2t {
        backbone: MlpModel,
        head: H2tClassifier,
    },
}

impl Classifier {
    pub fn predict(&self, x: &Matrix, exec: Execution) -> Result<Vec<usize>> {
        match self {
            Classifier::Network(model) => {
                if x.cols() != model.input_dim() {
                    return Err(Error::shape(
                        "classifier input",
                        format!("n x {}", model.input_dim()),
                        format!("{} x {}", x.rows(), x.cols()),
                    ));
                }
                let parts = exec
                    .map_row_chunks(x, DEFAULT_CHUNK_ROWS, |c| model.predict(&c))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                Ok(parts.concat())
            }
            Classifier::H2t { backbone, head } => Ok(head.logits(backbone, x, exec)?.argmax_rows()),
        }
    }
}

/// Per-group accuracies of `classifier` on `data` (inference mode).
pub fn evaluate_groups(
    classifier: &Classifier,
    data: &GroupedDataset,
    exec: Execution,
) -> Result<GroupMetrics> {
    let preds = classifier.predict(data.features(), exec)?;
    evaluate_predictions(&preds, data)
}
