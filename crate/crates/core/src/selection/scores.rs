use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use super::{FeatureBank, LayerSpan};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `s_i = ‖W[:,i]‖₂` for a `C × D` weight matrix.
pub fn relevance_scores(weights: &Matrix) -> Vec<f64> {
    let (c, d) = weights.shape();
    (0..d)
        .map(|i| (0..c).map(|k| weights[(k, i)].powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `max(1, floor(τ·D))`. A tiny slack absorbs products such as
/// `0.29·100 = 28.999…`.
pub fn selection_size(tau: f64, d: usize) -> usize {
    (((tau * d as f64) + 1e-9).floor() as usize).clamp(1, d.max(1))
}

/// Keeps the `max(1, floor(τ·D))` highest scores; equal scores are ranked
/// by ascending index.
pub fn select_top_fraction(scores: &[f64], tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("selection.tau: {tau} not in (0, 1]")));
    }
    let d = scores.len();
    let mut mask = vec![false; d];
    if d == 0 {
        return Ok(mask);
    }
    let k = selection_size(tau, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    /// Tap index per entry.
    pub layers: Vec<usize>,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    /// No feature selected; proportions are all zero.
    pub degenerate: bool,
}

impl LayerHistogram {
    /// Mass outside the last (penultimate) layer.
    pub fn non_final_mass(&self) -> f64 {
        let n = self.proportions.len();
        self.proportions[..n.saturating_sub(1)].iter().sum()
    }
}

/// Share of the selected features that falls in each layer.
pub fn layer_histogram(mask: &[bool], spans: &[LayerSpan]) -> Result<LayerHistogram> {
    let extent = spans.last().map_or(0, |s| s.start + s.len);
    if mask.len() != extent {
        return Err(Error::shape("layer_histogram mask", extent, mask.len()));
    }
    let counts: Vec<usize> = spans
        .iter()
        .map(|s| {
            mask[s.start..s.start + s.len]
                .iter()
                .filter(|&&m| m)
                .count()
        })
        .collect();
    let total: usize = counts.iter().sum();
    let proportions = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect();
    Ok(LayerHistogram {
        layers: spans.iter().map(|s| s.layer).collect(),
        counts,
        proportions,
        degenerate: total == 0,
    })
}

/// Column subset in ascending index order. Layers that lose every column
/// keep a zero-length span.
pub fn apply_mask(bank: &FeatureBank, mask: &[bool]) -> Result<FeatureBank> {
    if mask.len() != bank.width() {
        return Err(Error::shape("apply_mask", bank.width(), mask.len()));
    }
    let columns: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut spans = Vec::with_capacity(bank.spans.len());
    let mut start = 0;
    for s in &bank.spans {
        let len = mask[s.start..s.start + s.len]
            .iter()
            .filter(|&&m| m)
            .count();
        spans.push(LayerSpan {
            layer: s.layer,
            start,
            len,
        });
        start += len;
    }
    Ok(FeatureBank {
        features: bank.features.select_columns(&columns),
        spans,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    pub tau: f64,
    pub spans: Vec<LayerSpan>,
    pub histogram: LayerHistogram,
}

impl SelectionResult {
    pub fn new(scores: Vec<f64>, tau: f64, spans: Vec<LayerSpan>) -> Result<Self> {
        let mask = select_top_fraction(&scores, tau)?;
        let histogram = layer_histogram(&mask, &spans)?;
        Ok(SelectionResult {
            scores,
            mask,
            tau,
            spans,
            histogram,
        })
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// `flat_index,layer,index_in_layer,score,selected`
pub fn write_scores_csv(result: &SelectionResult, path: &Path) -> Result<()> {
    let mut out = String::from("flat_index,layer,index_in_layer,score,selected\n");
    for s in &result.spans {
        for k in 0..s.len {
            let i = s.start + k;
            let _ = writeln!(
                out,
                "{i},{},{k},{},{}",
                s.layer,
                result.scores[i],
                u8::from(result.mask[i])
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `layer,proportion`
pub fn write_histogram_csv(histogram: &LayerHistogram, path: &Path) -> Result<()> {
    let mut out = String::from("layer,proportion\n");
    for (l, p) in histogram.layers.iter().zip(&histogram.proportions) {
        let _ = writeln!(out, "{l},{p}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(lens: &[usize]) -> Vec<LayerSpan> {
        let mut start = 0;
        lens.iter()
            .enumerate()
            .map(|(layer, &len)| {
                let s = LayerSpan { layer, start, len };
                start += len;
                s
            })
            .collect()
    }

    #[test]
    fn scores_are_column_norms() {
        let w = Matrix::from_rows(&[[0.0, 3.0], [0.0, 4.0]]);
        assert_eq!(relevance_scores(&w), vec![0.0, 5.0]);
    }

    #[test]
    fn hand_sorted_selection() {
        let m = select_top_fraction(&[0.5, 0.1, 0.9, 0.3], 0.5).unwrap();
        assert_eq!(m, vec![true, false, true, false]);
        assert!(select_top_fraction(&[0.5, 0.1], 1.0)
            .unwrap()
            .iter()
            .all(|&b| b));
        assert!(select_top_fraction(&[0.5], 0.0).is_err());
        assert!(select_top_fraction(&[0.5], 1.5).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = select_top_fraction(&[1.0, 2.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(m, vec![true, true, false, false]);
    }

    #[test]
    fn tiny_tau_keeps_one() {
        let m = select_top_fraction(&[0.1, 0.7, 0.3], 1e-9).unwrap();
        assert_eq!(m, vec![false, true, false]);
        assert_eq!(selection_size(0.29, 100), 29);
    }

    #[test]
    fn histogram_cases() {
        let h = layer_histogram(&[false, false, true, true], &spans(&[2, 2])).unwrap();
        assert_eq!(h.proportions, vec![0.0, 1.0]);
        let h = layer_histogram(&[true, false, true, false], &spans(&[2, 2])).unwrap();
        assert_eq!(h.proportions, vec![0.5, 0.5]);
        let h = layer_histogram(&[false; 4], &spans(&[2, 2])).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.proportions, vec![0.0, 0.0]);
        assert!(layer_histogram(&[true; 3], &spans(&[2, 2])).is_err());
    }

    #[test]
    fn masking_recomputes_offsets() {
        let bank = FeatureBank {
            features: Matrix::from_rows(&[[0.0, 1.0, 2.0, 3.0, 4.0]]),
            spans: spans(&[3, 2]),
        };
        let full = apply_mask(&bank, &[true; 5]).unwrap();
        assert_eq!(full, bank);
        let r = apply_mask(&bank, &[false, false, false, false, true]).unwrap();
        assert_eq!(r.features, Matrix::from_rows(&[[4.0]]));
        assert_eq!(
            r.spans,
            vec![
                LayerSpan {
                    layer: 0,
                    start: 0,
                    len: 0
                },
                LayerSpan {
                    layer: 1,
                    start: 0,
                    len: 1
                }
            ]
        );
        let r = apply_mask(&bank, &[false, true, true, true, false]).unwrap();
        assert_eq!(
            r.spans[1],
            LayerSpan {
                layer: 1,
                start: 2,
                len: 1
            }
        );
    }
}
