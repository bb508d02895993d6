//! On-disk run directories.
//!
//! ```text
//! <run>/manifest.json     config echo, timings, artifact paths, metrics
//! <run>/metrics.json      metrics block alone
//! <run>/phase1.ckpt.json  network after unbalanced fine-tuning
//! <run>/final.ckpt.json   retrained network (erm, dfr, affine-dfr)
//! <run>/h2t_head.json     bank recipe, selected columns and head (h2t-dfr)
//! <run>/scores.csv        relevance scores (h2t-dfr)
//! <run>/histogram.csv     per-layer selection proportions (h2t-dfr)
//! ```

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::{Method, RunConfig};
use super::metrics::GroupMetrics;
use super::phases::{evaluate_groups, prepare_data, Classifier, H2tClassifier};
use super::run::RunOutcome;
use crate::data::{save_csv, GeneratedSplits, SpuriousGenSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::selection::{write_histogram_csv, write_scores_csv, LayerHistogram};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";
pub const H2T_HEAD_FILE: &str = "h2t_head.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
const MANIFEST_FORMAT: &str = "h2t-run";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub seed: u64,
    pub config: RunConfig,
    /// Free-form resolution record supplied by the caller (preset name,
    /// per-key value sources).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub phase_seconds: BTreeMap<String, f64>,
    /// Role → file name relative to the run directory.
    pub checkpoints: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub group_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub erm_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<LayerHistogram>,
    pub metrics: GroupMetrics,
}

impl RunManifest {
    /// Row label for reports: the preset name when one was used, otherwise
    /// the data source.
    pub fn dataset_label(&self) -> String {
        if let Some(p) = self
            .provenance
            .as_ref()
            .and_then(|p| p.get("preset"))
            .and_then(|p| p.as_str())
        {
            return p.to_string();
        }
        match self.config.data.source {
            super::config::DataSource::Synthetic => {
                let v =
                    serde_json::to_value(self.config.data.generator.variant).unwrap_or_default();
                format!("synthetic/{}", v.as_str().unwrap_or("?"))
            }
            super::config::DataSource::Csv => format!("csv/{}", self.config.data.csv.train),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct H2tHeadFile {
    format: String,
    version: u32,
    classifier: H2tClassifier,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes every artifact of `outcome` into `dir` (created if needed).
pub fn write_run(
    outcome: &RunOutcome,
    dir: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let mut checkpoints = BTreeMap::new();
    let mut artifacts = BTreeMap::new();

    save_checkpoint(&outcome.phase1, &dir.join(PHASE1_CHECKPOINT))?;
    checkpoints.insert("phase1".to_string(), PHASE1_CHECKPOINT.to_string());
    match &outcome.classifier {
        Classifier::Network(model) => {
            save_checkpoint(model, &dir.join(FINAL_CHECKPOINT))?;
            checkpoints.insert("final".to_string(), FINAL_CHECKPOINT.to_string());
        }
        Classifier::H2t { head, .. } => {
            let file = H2tHeadFile {
                format: "h2t-head".into(),
                version: 1,
                classifier: head.clone(),
            };
            write_json(&file, &dir.join(H2T_HEAD_FILE))?;
            checkpoints.insert("h2t_head".to_string(), H2T_HEAD_FILE.to_string());
        }
    }
    if let Some(sel) = &outcome.selection {
        write_scores_csv(sel, &dir.join(SCORES_FILE))?;
        write_histogram_csv(&sel.histogram, &dir.join(HISTOGRAM_FILE))?;
        artifacts.insert("scores".to_string(), SCORES_FILE.to_string());
        artifacts.insert("histogram".to_string(), HISTOGRAM_FILE.to_string());
    }
    std::fs::write(dir.join(METRICS_FILE), outcome.metrics.to_json()? + "\n")?;
    artifacts.insert("metrics".to_string(), METRICS_FILE.to_string());

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        method: outcome.config.method,
        seed: outcome.config.seed,
        config: outcome.config.clone(),
        provenance,
        phase_seconds: outcome.phase_seconds.iter().cloned().collect(),
        checkpoints,
        artifacts,
        group_counts: outcome.group_counts.clone(),
        erm_losses: outcome.erm_losses.clone(),
        histogram: outcome.selection.as_ref().map(|s| s.histogram.clone()),
        metrics: outcome.metrics.clone(),
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::Checkpoint(format!(
            "missing artifact {}",
            p.display()
        )));
    }
    Ok(p)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = require(dir, MANIFEST_FILE)?;
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported manifest {} v{}",
            m.format, m.version
        )));
    }
    Ok(m)
}

/// Phase-1 network stored in a run directory.
pub fn load_phase1(dir: &Path) -> Result<crate::nn::MlpModel> {
    load_checkpoint(&require(dir, PHASE1_CHECKPOINT)?)
}

pub fn load_classifier(dir: &Path, manifest: &RunManifest) -> Result<Classifier> {
    if let Some(name) = manifest.checkpoints.get("final") {
        return Ok(Classifier::Network(load_checkpoint(&require(dir, name)?)?));
    }
    if let Some(name) = manifest.checkpoints.get("h2t_head") {
        let backbone = load_phase1(dir)?;
        let file: H2tHeadFile =
            serde_json::from_str(&std::fs::read_to_string(require(dir, name)?)?)?;
        return Ok(Classifier::H2t {
            backbone,
            head: file.classifier,
        });
    }
    Err(Error::Checkpoint(format!(
        "{}: manifest names no final classifier",
        dir.join(MANIFEST_FILE).display()
    )))
}

/// Result of re-evaluating a stored run.
#[derive(Clone, Debug)]
pub struct Replay {
    pub metrics: GroupMetrics,
    pub stored_json: String,
    pub replayed_json: String,
}

impl Replay {
    pub fn matches(&self) -> bool {
        self.stored_json == self.replayed_json
    }
}

/// Reloads the stored classifier, rebuilds the test split from the
/// manifest's config and recomputes the metrics.
pub fn replay_eval(dir: &Path, exec: Execution) -> Result<Replay> {
    let manifest = read_manifest(dir)?;
    let classifier = load_classifier(dir, &manifest)?;
    let splits = prepare_data(&manifest.config)?;
    let metrics = evaluate_groups(&classifier, &splits.test, exec)?;
    let stored_json = std::fs::read_to_string(require(dir, METRICS_FILE)?)?;
    let replayed_json = metrics.to_json()? + "\n";
    Ok(Replay {
        metrics,
        stored_json,
        replayed_json,
    })
}

/// Dataset manifest written next to generated CSV splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SpuriousGenSpec,
    pub seed: u64,
    pub files: BTreeMap<String, String>,
    pub group_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `dataset.json`.
pub fn write_generated(
    spec: &SpuriousGenSpec,
    splits: &GeneratedSplits,
    dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let mut group_counts = BTreeMap::new();
    for (name, data) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let file = format!("{name}.csv");
        save_csv(data, &dir.join(&file))?;
        files.insert(name.to_string(), file);
        group_counts.insert(name.to_string(), data.group_stats().by_key());
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed: spec.seed,
        files,
        group_counts,
    };
    write_json(&manifest, &dir.join("dataset.json"))?;
    Ok(manifest)
}
