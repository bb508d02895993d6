use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::exec::{Execution, DEFAULT_CHUNK_ROWS};
use crate::matrix::Matrix;
use crate::nn::{MlpModel, Mode};

/// Added to the standard deviation before dividing.
pub const NORMALIZER_EPSILON: f64 = 1e-8;

/// Averages non-overlapping contiguous windows. Window `j` starts at
/// `ceil(j·w/t)`, so widths differ by at most one and wider windows come
/// first.
pub fn pool_layer(tap: &Matrix, target: usize) -> Result<Matrix> {
    let (n, w) = tap.shape();
    if target == 0 || target > w {
        return Err(Error::Config(format!(
            "pool target {target} must lie in 1..={w}"
        )));
    }
    if target == w {
        return Ok(tap.clone());
    }
    let bounds: Vec<(usize, usize)> = (0..target)
        .map(|j| ((j * w).div_ceil(target), ((j + 1) * w).div_ceil(target)))
        .collect();
    let mut out = Matrix::zeros(n, target);
    for i in 0..n {
        let row = tap.row(i);
        for (j, &(s, e)) in bounds.iter().enumerate() {
            out[(i, j)] = row[s..e].iter().sum::<f64>() / (e - s) as f64;
        }
    }
    Ok(out)
}

/// Per-feature standardization `x ↦ (x − mean)/(std + 1e-8)` with the
/// population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(reference: &Matrix) -> Result<Self> {
        let (n, d) = reference.shape();
        if n < 2 {
            return Err(Error::Config(format!(
                "normalizer needs at least 2 reference rows, got {n}"
            )));
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let first = reference[(0, j)];
            if (1..n).all(|i| reference[(i, j)] == first) {
                // exact constant: mean = value so the column maps to exactly 0
                mean[j] = first;
                continue;
            }
            let m = (0..n).map(|i| reference[(i, j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (reference[(i, j)] - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            std[j] = var.sqrt();
        }
        Ok(Normalizer { mean, std })
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / (self.std[j] + NORMALIZER_EPSILON);
            }
        }
        out
    }

    pub fn select(&self, columns: &[usize]) -> Normalizer {
        Normalizer {
            mean: columns.iter().map(|&j| self.mean[j]).collect(),
            std: columns.iter().map(|&j| self.std[j]).collect(),
        }
    }
}

/// Which hidden-layer outputs enter the bank. Logits never do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapSet {
    /// Every ReLU output, the last of which is the penultimate representation.
    All,
    /// Only the representation feeding the head.
    Penultimate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub taps: TapSet,
    /// Per-layer pooled width; layers narrower than this are left unpooled.
    pub target_size: usize,
    pub normalize: bool,
}

/// Contiguous column range of one tapped layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    /// Tap index (0 = first hidden layer).
    pub layer: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Matrix,
    pub spans: Vec<LayerSpan>,
}

impl FeatureBank {
    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Tap index owning a flat column.
    pub fn layer_of(&self, column: usize) -> Option<(usize, usize)> {
        self.spans
            .iter()
            .find(|s| column >= s.start && column < s.start + s.len)
            .map(|s| (s.layer, column - s.start))
    }
}

/// Frozen recipe turning raw inputs into bank rows: taps, pooling and the
/// normalization fitted on the reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub config: BankConfig,
    pub layers: Vec<usize>,
    pub spans: Vec<LayerSpan>,
    pub normalizer: Option<Normalizer>,
}

impl FeatureExtractor {
    /// Fits on `reference` and returns the extractor with the reference bank.
    pub fn fit(
        model: &MlpModel,
        reference: &Matrix,
        config: BankConfig,
        exec: Execution,
    ) -> Result<(Self, FeatureBank)> {
        let widths = model.tap_widths();
        let hidden = widths.len() - 1;
        if hidden == 0 {
            return Err(Error::Config("model has no hidden layer to tap".into()));
        }
        if config.target_size == 0 {
            return Err(Error::Config("selection.target_size must be >= 1".into()));
        }
        let layers: Vec<usize> = match config.taps {
            TapSet::All => (0..hidden).collect(),
            TapSet::Penultimate => vec![hidden - 1],
        };
        let mut spans = Vec::with_capacity(layers.len());
        let mut start = 0;
        for &layer in &layers {
            let len = widths[layer].min(config.target_size);
            spans.push(LayerSpan { layer, start, len });
            start += len;
        }
        let mut extractor = FeatureExtractor {
            config,
            layers,
            spans,
            normalizer: None,
        };
        let raw = extractor.raw_features(model, reference, exec)?;
        let features = if config.normalize {
            let norm = Normalizer::fit(&raw)?;
            let f = norm.transform(&raw);
            extractor.normalizer = Some(norm);
            f
        } else {
            raw
        };
        let bank = FeatureBank {
            features,
            spans: extractor.spans.clone(),
        };
        Ok((extractor, bank))
    }

    fn raw_chunk(&self, model: &MlpModel, chunk: Matrix) -> Result<Matrix> {
        let out = model.forward_with_taps(&chunk, Mode::Inference)?;
        let pooled = self
            .layers
            .iter()
            .zip(&self.spans)
            .map(|(&l, s)| pool_layer(&out.taps[l], s.len))
            .collect::<Result<Vec<_>>>()?;
        Matrix::hstack(&pooled)
    }

    fn raw_features(&self, model: &MlpModel, x: &Matrix, exec: Execution) -> Result<Matrix> {
        let width = self.spans.iter().map(|s| s.len).sum();
        if x.rows() == 0 {
            model.forward_with_taps(x, Mode::Inference)?;
            return Ok(Matrix::zeros(0, width));
        }
        let parts = exec
            .map_row_chunks(x, DEFAULT_CHUNK_ROWS, |c| self.raw_chunk(model, c))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::vstack(&parts, width))
    }

    pub fn transform(&self, model: &MlpModel, x: &Matrix, exec: Execution) -> Result<FeatureBank> {
        let raw = self.raw_features(model, x, exec)?;
        let features = match &self.normalizer {
            Some(n) => n.transform(&raw),
            None => raw,
        };
        Ok(FeatureBank {
            features,
            spans: self.spans.clone(),
        })
    }
}

/// Bank over `data` with normalization fitted on `data` itself.
pub fn build_bank(
    model: &MlpModel,
    data: &GroupedDataset,
    config: BankConfig,
    exec: Execution,
) -> Result<(FeatureExtractor, FeatureBank)> {
    FeatureExtractor::fit(model, data.features(), config, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn pooling_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(pool_layer(&x, 2).unwrap(), Matrix::from_rows(&[[1.5, 3.5]]));
        assert_eq!(pool_layer(&x, 4).unwrap(), x);
        let y = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert_eq!(pool_layer(&y, 2).unwrap(), Matrix::from_rows(&[[2.0, 4.5]]));
        assert!(pool_layer(&x, 5).is_err());
        assert!(pool_layer(&x, 0).is_err());
    }

    #[test]
    fn pooling_windows_partition_evenly() {
        for w in 1..40 {
            for t in 1..=w {
                let x = Matrix::from_vec(1, w, vec![1.0; w]).unwrap();
                let p = pool_layer(&x, t).unwrap();
                assert!(p.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-15));
                let bounds: Vec<usize> = (0..=t).map(|j| (j * w).div_ceil(t)).collect();
                let widths: Vec<usize> = bounds.windows(2).map(|b| b[1] - b[0]).collect();
                let (lo, hi) = (widths.iter().min().unwrap(), widths.iter().max().unwrap());
                assert!(hi - lo <= 1 && *lo >= 1);
            }
        }
    }

    #[test]
    fn normalizer_cases() {
        let x = Matrix::from_rows(&[[0.1, 0.0, -1.0], [0.1, 2.0, 1.0]]);
        let n = Normalizer::fit(&x).unwrap();
        let t = n.transform(&x);
        assert_eq!(t.column(0), vec![0.0, 0.0]);
        assert_eq!(n.mean[1], 1.0);
        assert_eq!(n.std[1], 1.0);
        assert!((t[(0, 1)] + 1.0).abs() < 1e-7 && (t[(1, 1)] - 1.0).abs() < 1e-7);
        // zero-mean unit-std column is a fixed point
        assert!((t[(0, 2)] + 1.0).abs() < 1e-6 && (t[(1, 2)] - 1.0).abs() < 1e-6);
        assert!(Normalizer::fit(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn offsets_follow_pooling_rule() {
        let mut rng = stream_rng(0, Stream::Init);
        let model = MlpModel::mlp(3, &[8, 4, 2], 2, false, &mut rng).unwrap();
        let x = Matrix::from_vec(6, 3, (0..18).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let cfg = BankConfig {
            taps: TapSet::All,
            target_size: 4,
            normalize: true,
        };
        let (ext, bank) = FeatureExtractor::fit(&model, &x, cfg, Execution::Sequential).unwrap();
        let lens: Vec<usize> = bank.spans.iter().map(|s| s.len).collect();
        let starts: Vec<usize> = bank.spans.iter().map(|s| s.start).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        assert_eq!(starts, vec![0, 4, 8]);
        assert_eq!(bank.width(), 10);
        assert_eq!(
            ext.transform(&model, &x, Execution::Sequential).unwrap(),
            bank
        );
    }

    #[test]
    fn one_hidden_layer_bank_width() {
        let mut rng = stream_rng(0, Stream::Init);
        let model = MlpModel::mlp(3, &[5], 2, true, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let cfg = BankConfig {
            taps: TapSet::All,
            target_size: 64,
            normalize: false,
        };
        let (_, bank) = FeatureExtractor::fit(&model, &x, cfg, Execution::Sequential).unwrap();
        assert_eq!(bank.width(), 5);
        assert_eq!(
            bank.features,
            model.penultimate(&x, Mode::Inference).unwrap()
        );
    }

    #[test]
    fn sequential_and_default_execution_agree() {
        let mut rng = stream_rng(5, Stream::Init);
        let model = MlpModel::mlp(4, &[16, 8], 2, true, &mut rng).unwrap();
        let x = Matrix::from_vec(
            700,
            4,
            (0..2800).map(|v| (v as f64 * 0.013).cos()).collect(),
        )
        .unwrap();
        let cfg = BankConfig {
            taps: TapSet::All,
            target_size: 6,
            normalize: true,
        };
        let a = FeatureExtractor::fit(&model, &x, cfg, Execution::Sequential).unwrap();
        let b = FeatureExtractor::fit(&model, &x, cfg, Execution::default()).unwrap();
        assert_eq!(a, b);
    }
}
