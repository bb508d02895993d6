//! End-to-end training: configuration, phases, orchestration, artifacts and
//! reporting.

pub mod artifacts;
pub mod config;
pub mod metrics;
pub mod phases;
pub mod report;
pub mod run;

pub use artifacts::{
    load_classifier, load_phase1, read_manifest, replay_eval, write_generated, write_run,
    DatasetManifest, Replay, RunManifest,
};
pub use config::{
    CsvPaths, DataConfig, DataSource, Method, ModelConfig, RetrainConfig, RunConfig,
    SelectionConfig, SelectionData,
};
pub use metrics::{evaluate_predictions, GroupMetrics, MeanStderr};
pub use phases::{
    affine_dfr, dfr_retrain, erm_finetune, evaluate_groups, h2t_retrain, h2t_select, init_model,
    prepare_data, retrain_sets, Classifier, ErmOutcome, H2tClassifier, RetrainOutcome,
    SelectionOutcome, Splits,
};
pub use report::{collect_rows, published, render_table, ReportRow};
pub use run::{run, run_with_phase1, sweep, RunOutcome, SweepSummary};
