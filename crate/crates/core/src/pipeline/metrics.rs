use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{group_key, GroupedDataset};
use crate::error::{Error, Result};

/// Group-robustness summary. Groups with no examples are listed in
/// `empty_groups` and excluded from `worst` and `mean_group`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Accuracy per `"y,a"` key.
    pub per_group: BTreeMap<String, f64>,
    pub worst: f64,
    /// Unweighted mean of the per-group accuracies.
    pub mean_group: f64,
    pub overall: f64,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_groups: Vec<String>,
}

impl GroupMetrics {
    pub fn best(&self) -> f64 {
        self.per_group
            .values()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Canonical JSON; identical metrics give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate_predictions(predictions: &[usize], data: &GroupedDataset) -> Result<GroupMetrics> {
    if predictions.len() != data.len() {
        return Err(Error::shape("predictions", data.len(), predictions.len()));
    }
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let g = data.num_groups();
    let mut correct = vec![0usize; g];
    let mut total = vec![0usize; g];
    for (i, &p) in predictions.iter().enumerate() {
        let grp = data.group_of(i);
        total[grp] += 1;
        if p == data.labels()[i] {
            correct[grp] += 1;
        }
    }
    let mut per_group = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut empty_groups = Vec::new();
    let mut accs = Vec::new();
    for grp in 0..g {
        let (y, a) = data.decode_group(grp);
        let key = group_key(y, a);
        counts.insert(key.clone(), total[grp]);
        if total[grp] == 0 {
            empty_groups.push(key);
            continue;
        }
        let acc = correct[grp] as f64 / total[grp] as f64;
        per_group.insert(key, acc);
        accs.push(acc);
    }
    let worst = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_group = accs.iter().sum::<f64>() / accs.len() as f64;
    let overall = correct.iter().sum::<usize>() as f64 / data.len() as f64;
    Ok(GroupMetrics {
        per_group,
        worst,
        mean_group,
        overall,
        counts,
        empty_groups,
    })
}

/// Mean and standard error (`sample std / √k`) across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// `None` for a single run.
    pub stderr: Option<f64>,
    pub n: usize,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let stderr = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        MeanStderr { mean, stderr, n }
    }

    /// Percent with two decimals, `"85.99 ± 0.74"` or `"85.99"`.
    pub fn percent(&self) -> String {
        match self.stderr {
            Some(se) => format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * se),
            None => format!("{:.2}", 100.0 * self.mean),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::matrix::Matrix;

    fn four_groups(per: usize) -> GroupedDataset {
        let mut labels = Vec::new();
        let mut attrs = Vec::new();
        for g in 0..4 {
            for _ in 0..per {
                labels.push(g / 2);
                attrs.push(g % 2);
            }
        }
        GroupedDataset::new(Matrix::zeros(4 * per, 1), labels, attrs, 2, 2, Split::Test).unwrap()
    }

    #[test]
    fn arithmetic_example() {
        let d = four_groups(4);
        // accuracies 1.0, 0.5, 0.75, 1.0
        let mut preds = d.labels().to_vec();
        preds[4] ^= 1;
        preds[5] ^= 1;
        preds[8] ^= 1;
        let m = evaluate_predictions(&preds, &d).unwrap();
        assert_eq!(m.per_group["0,1"], 0.5);
        assert_eq!(m.per_group["1,0"], 0.75);
        assert_eq!(m.worst, 0.5);
        assert_eq!(m.mean_group, 0.8125);
        assert_eq!(m.overall, 13.0 / 16.0);
    }

    #[test]
    fn perfect_classifier() {
        let d = four_groups(3);
        let m = evaluate_predictions(d.labels(), &d).unwrap();
        assert_eq!((m.worst, m.mean_group, m.overall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_group_flagged_and_excluded() {
        let d = GroupedDataset::new(
            Matrix::zeros(3, 1),
            vec![0, 0, 1],
            vec![0, 1, 1],
            2,
            2,
            Split::Test,
        )
        .unwrap();
        let m = evaluate_predictions(&[0, 1, 1], &d).unwrap();
        assert_eq!(m.empty_groups, vec!["1,0".to_string()]);
        assert_eq!(m.per_group.len(), 3);
        assert_eq!(m.worst, 0.0);
        assert_eq!(m.mean_group, 2.0 / 3.0);
    }

    #[test]
    fn stderr_of_single_run_is_absent() {
        let s = MeanStderr::of(&[0.5]);
        assert_eq!(s.stderr, None);
        assert_eq!(s.percent(), "50.00");
        let s = MeanStderr::of(&[0.5, 0.7]);
        assert!((s.stderr.unwrap() - 0.1).abs() < 1e-12);
    }
}
