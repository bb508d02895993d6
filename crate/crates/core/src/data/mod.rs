//! Grouped datasets: every example carries a class label `y` and a spurious
//! attribute `a`, and the pair `(y, a)` defines its group.

mod balance;
mod csv;
mod generate;

pub use balance::{balanced_batches, balanced_subset, shuffled_batches};
pub use csv::{load_csv, save_csv};
pub use generate::{generate, train_group_counts, GeneratedSplits, SpuriousGenSpec, Variant};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    features: Matrix,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    classes: usize,
    attribute_values: usize,
    split: Split,
}

impl GroupedDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        attributes: Vec<usize>,
        classes: usize,
        attribute_values: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || attributes.len() != n {
            return Err(Error::shape(
                "GroupedDataset",
                format!("{n} labels and attributes"),
                format!("{} labels, {} attributes", labels.len(), attributes.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        if let Some(&a) = attributes.iter().find(|&&a| a >= attribute_values) {
            return Err(Error::Config(format!(
                "attribute {a} out of range for {attribute_values} values"
            )));
        }
        Ok(GroupedDataset {
            features,
            labels,
            attributes,
            classes,
            attribute_values,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn attribute_values(&self) -> usize {
        self.attribute_values
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn num_groups(&self) -> usize {
        self.classes * self.attribute_values
    }

    /// `y·A + a`
    pub fn group_index(&self, y: usize, a: usize) -> usize {
        y * self.attribute_values + a
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.group_index(self.labels[i], self.attributes[i])
    }

    /// Inverse of [`group_index`](Self::group_index).
    pub fn decode_group(&self, g: usize) -> (usize, usize) {
        (g / self.attribute_values, g % self.attribute_values)
    }

    pub fn groups(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.group_of(i)).collect()
    }

    pub fn select(&self, indices: &[usize]) -> GroupedDataset {
        GroupedDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            attributes: indices.iter().map(|&i| self.attributes[i]).collect(),
            classes: self.classes,
            attribute_values: self.attribute_values,
            split: self.split,
        }
    }

    pub fn group_stats(&self) -> GroupStats {
        let mut counts = vec![0usize; self.num_groups()];
        for i in 0..self.len() {
            counts[self.group_of(i)] += 1;
        }
        let n = self.len();
        let proportions = counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        GroupStats {
            counts,
            proportions,
            attribute_values: self.attribute_values,
        }
    }

    /// All groups present with the same count.
    pub fn is_balanced(&self) -> bool {
        let counts = self.group_stats().counts;
        counts[0] > 0 && counts.iter().all(|&c| c == counts[0])
    }
}

/// Per-group counts indexed by group, for every `(y, a)` pair including
/// empty ones.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    attribute_values: usize,
}

impl GroupStats {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Counts keyed `"y,a"`.
    pub fn by_key(&self) -> BTreeMap<String, usize> {
        self.counts
            .iter()
            .enumerate()
            .map(|(g, &c)| {
                (
                    group_key(g / self.attribute_values, g % self.attribute_values),
                    c,
                )
            })
            .collect()
    }
}

pub fn group_key(y: usize, a: usize) -> String {
    format!("{y},{a}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GroupedDataset {
        GroupedDataset::new(
            Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]]),
            vec![0, 0, 1, 1, 1],
            vec![0, 1, 0, 1, 1],
            2,
            2,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn group_index_roundtrips() {
        let d = tiny();
        for i in 0..d.len() {
            let g = d.group_of(i);
            assert_eq!(g, d.labels()[i] * 2 + d.attributes()[i]);
            assert_eq!(d.decode_group(g), (d.labels()[i], d.attributes()[i]));
        }
    }

    #[test]
    fn stats_sum_to_n() {
        let s = tiny().group_stats();
        assert_eq!(s.counts, vec![1, 1, 1, 2]);
        assert_eq!(s.total(), 5);
        assert!((s.proportions.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(s.by_key()["1,1"], 2);
    }

    #[test]
    fn empty_groups_are_listed() {
        let d = GroupedDataset::new(
            Matrix::from_rows(&[[0.0]]),
            vec![1],
            vec![0],
            2,
            2,
            Split::Val,
        )
        .unwrap();
        let s = d.group_stats();
        assert_eq!(s.counts, vec![0, 0, 1, 0]);
        assert!(!d.is_balanced());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(
            GroupedDataset::new(Matrix::zeros(1, 1), vec![2], vec![0], 2, 2, Split::Val).is_err()
        );
        assert!(
            GroupedDataset::new(Matrix::zeros(1, 1), vec![0], vec![3], 2, 2, Split::Val).is_err()
        );
    }
}
