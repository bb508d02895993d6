use h2t_core::data::{balanced_subset, GroupedDataset, Split};
use h2t_core::selection::{relevance_scores, select_top_fraction, selection_size};
use h2t_core::Matrix;
use proptest::prelude::*;

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..10.0f64], 1..200)
}

proptest! {
    #[test]
    fn selection_ignores_monotone_transforms(scores in scores_strategy(), tau in 0.001..=1.0f64) {
        let a = select_top_fraction(&scores, tau).unwrap();
        // power-of-two scalings are exact, hence strictly monotone
        for scale in [4.0, 0.125] {
            let mapped: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(&a, &select_top_fraction(&mapped, tau).unwrap());
        }
        prop_assert_eq!(a.iter().filter(|&&b| b).count(), selection_size(tau, scores.len()));
    }

    #[test]
    fn selected_scores_dominate_rejected(scores in scores_strategy(), tau in 0.001..=1.0f64) {
        let mask = select_top_fraction(&scores, tau).unwrap();
        let min_in = scores.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let max_out = scores.iter().zip(&mask).filter(|(_, &m)| !m).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
    }

    #[test]
    fn scores_ignore_row_permutation(
        cols in 1usize..12,
        values in prop::collection::vec(-5.0..5.0f64, 48),
        shift in 0usize..4,
    ) {
        let rows = 4;
        let cols = cols.min(values.len() / rows);
        let w = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let order: Vec<usize> = (0..rows).map(|i| (i + shift) % rows).collect();
        let permuted = w.select_rows(&order);
        let a = relevance_scores(&w);
        let b = relevance_scores(&permuted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn balanced_subset_invariants(counts in prop::collection::vec(1usize..40, 4), seed in 0u64..1000) {
        let mut labels = Vec::new();
        let mut attrs = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                labels.push(g / 2);
                attrs.push(g % 2);
            }
        }
        let n = labels.len();
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let data = GroupedDataset::new(x, labels, attrs, 2, 2, Split::Val).unwrap();
        let subset = balanced_subset(&data, seed).unwrap();
        let min = *counts.iter().min().unwrap();
        prop_assert_eq!(subset.group_stats().counts, vec![min; 4]);
        // rows are drawn without replacement and kept in source order
        let ids: Vec<f64> = subset.features().column(0);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(balanced_subset(&data, seed).unwrap(), subset);
    }
}
