use std::collections::BTreeMap;
use std::time::Instant;

use super::config::{Method, RunConfig};
use super::metrics::{GroupMetrics, MeanStderr};
use super::phases::{
    affine_dfr, dfr_retrain, erm_finetune, evaluate_groups, h2t_retrain, h2t_select, init_model,
    prepare_data, retrain_sets, Classifier, Splits,
};
use crate::error::Result;
use crate::exec::Execution;
use crate::nn::MlpModel;
use crate::selection::SelectionResult;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub phase1: MlpModel,
    pub erm_losses: Vec<f64>,
    pub classifier: Classifier,
    pub selection: Option<SelectionResult>,
    pub selection_losses: Vec<f64>,
    pub retrain_losses: Vec<f64>,
    /// Test-split metrics.
    pub metrics: GroupMetrics,
    /// Wall-clock seconds per phase, in execution order.
    pub phase_seconds: Vec<(String, f64)>,
    /// Group counts per split, keyed `"y,a"`.
    pub group_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

struct Timer(Vec<(String, f64)>);

impl Timer {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.0
            .push((name.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Runs the configured method end to end.
pub fn run(cfg: &RunConfig, exec: Execution) -> Result<RunOutcome> {
    run_with_phase1(cfg, None, exec)
}

/// Like [`run`], but reuses an existing phase-1 model when given.
pub fn run_with_phase1(
    cfg: &RunConfig,
    phase1: Option<MlpModel>,
    exec: Execution,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut timer = Timer(Vec::new());
    let splits = timer
        .time("data", || prepare_data(cfg))
        .map_err(|e| e.in_phase("data"))?;
    run_on_splits(cfg, &splits, phase1, exec, timer)
}

fn run_on_splits(
    cfg: &RunConfig,
    splits: &Splits,
    phase1: Option<MlpModel>,
    exec: Execution,
    mut timer: Timer,
) -> Result<RunOutcome> {
    let seed = cfg.seed;
    let (phase1, erm_losses) = match phase1 {
        Some(m) => (m, Vec::new()),
        None => timer
            .time("erm", || {
                let model =
                    init_model(&cfg.model, splits.train.dim(), splits.train.classes(), seed)?;
                let out = erm_finetune(model, &splits.train, &cfg.erm, seed)?;
                Ok((out.model, out.epoch_losses))
            })
            .map_err(|e| e.in_phase("erm"))?,
    };

    let mut selection = None;
    let mut selection_losses = Vec::new();
    let mut retrain_losses = Vec::new();
    let classifier = match cfg.method {
        Method::Erm => Classifier::Network(phase1.clone()),
        Method::Dfr => {
            let out = timer
                .time("retrain", || {
                    let sets = retrain_sets(splits, cfg.dfr.repeats, seed)?;
                    dfr_retrain(&phase1, &sets, &cfg.dfr, seed, exec)
                })
                .map_err(|e| e.in_phase("retrain"))?;
            retrain_losses = out.epoch_losses;
            Classifier::Network(out.model)
        }
        Method::AffineDfr => {
            let out = timer
                .time("retrain", || {
                    affine_dfr(&phase1, &splits.val_rw, &cfg.dfr, seed)
                })
                .map_err(|e| e.in_phase("retrain"))?;
            retrain_losses = out.epoch_losses;
            Classifier::Network(out.model)
        }
        Method::H2tDfr => {
            let sel = timer
                .time("selection", || {
                    h2t_select(&phase1, splits, &cfg.selection, seed, exec)
                })
                .map_err(|e| e.in_phase("selection"))?;
            let (head, losses) = timer
                .time("retrain", || {
                    let sets = retrain_sets(splits, cfg.dfr.repeats, seed)?;
                    h2t_retrain(&phase1, &sel, &sets, &cfg.dfr, seed, exec)
                })
                .map_err(|e| e.in_phase("retrain"))?;
            retrain_losses = losses;
            selection_losses = sel.epoch_losses;
            selection = Some(sel.result);
            Classifier::H2t {
                backbone: phase1.clone(),
                head,
            }
        }
    };

    let metrics = timer
        .time("evaluate", || {
            evaluate_groups(&classifier, &splits.test, exec)
        })
        .map_err(|e| e.in_phase("evaluate"))?;

    let group_counts = [
        ("train", &splits.train),
        ("val", &splits.val),
        ("val_rw", &splits.val_rw),
        ("test", &splits.test),
    ]
    .into_iter()
    .map(|(k, d)| (k.to_string(), d.group_stats().by_key()))
    .collect();

    Ok(RunOutcome {
        config: cfg.clone(),
        phase1,
        erm_losses,
        classifier,
        selection,
        selection_losses,
        retrain_losses,
        metrics,
        phase_seconds: timer.0,
        group_counts,
    })
}

/// Aggregate of a multi-seed sweep.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub worst: MeanStderr,
    pub mean_group: MeanStderr,
    pub overall: MeanStderr,
}

impl SweepSummary {
    pub fn from_metrics(method: Method, seeds: Vec<u64>, metrics: &[&GroupMetrics]) -> Self {
        let col = |f: fn(&GroupMetrics) -> f64| {
            MeanStderr::of(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>())
        };
        SweepSummary {
            method,
            seeds,
            worst: col(|m| m.worst),
            mean_group: col(|m| m.mean_group),
            overall: col(|m| m.overall),
        }
    }
}

/// Runs seeds `0..k` of `cfg` as independent jobs. Data are prepared once
/// per job; results come back in seed order.
pub fn sweep(cfg: &RunConfig, seeds: u64, exec: Execution) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<u64> = (0..seeds).collect();
    exec.map_jobs(jobs, |seed| {
        let mut c = cfg.clone();
        c.seed = seed;
        run(&c, Execution::Sequential)
    })
    .into_iter()
    .collect()
}
