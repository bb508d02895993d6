//! All-layer feature selection.
//!
//! Hidden-layer activations are pooled to a target width, standardized and
//! concatenated into a [`FeatureBank`]. A linear head trained with a
//! group-lasso penalty (one group per feature column) yields a relevance
//! score per feature; the top `τ` fraction is kept.

mod bank;
mod lasso;
mod scores;

pub use bank::{
    build_bank, pool_layer, BankConfig, FeatureBank, FeatureExtractor, LayerSpan, Normalizer,
    TapSet, NORMALIZER_EPSILON,
};
pub use lasso::{group_lasso_penalty, train_linear_head, Batching, HeadTraining};
pub use scores::{
    apply_mask, layer_histogram, relevance_scores, select_top_fraction, selection_size,
    write_histogram_csv, write_scores_csv, LayerHistogram, SelectionResult,
};
