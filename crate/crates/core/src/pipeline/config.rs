use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::data::SpuriousGenSpec;
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::selection::{BankConfig, TapSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Dfr,
    AffineDfr,
    H2tDfr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::Dfr, Method::AffineDfr, Method::H2tDfr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Dfr => "dfr",
            Method::AffineDfr => "affine-dfr",
            Method::H2tDfr => "h2t-dfr",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::Dfr => "DFR",
            Method::AffineDfr => "Affine-DFR",
            Method::H2tDfr => "H2T-DFR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "method: unknown `{s}` (expected erm, dfr, affine-dfr, h2t-dfr)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub train: String,
    pub val: String,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub generator: SpuriousGenSpec,
    pub csv: CsvPaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
}

/// Which set the group-lasso head is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionData {
    /// The group-balanced validation subset (the method as specified).
    Balanced,
    /// The unbalanced training split.
    Train,
    /// The validation split before balancing (equals `Balanced` for
    /// synthetic data, whose validation split is balanced by construction).
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Group-lasso coefficient.
    pub lambda: f64,
    /// Fraction of bank features kept.
    pub tau: f64,
    pub target_size: usize,
    pub taps: TapSet,
    pub normalize: bool,
    pub data: SelectionData,
}

impl SelectionConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn bank(&self) -> BankConfig {
        BankConfig {
            taps: self.taps,
            target_size: self.target_size,
            normalize: self.normalize,
        }
    }
}

/// Balanced-retraining phase shared by DFR, Affine-DFR and the final
/// H2T-DFR head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Start the H2T-DFR head from the surviving group-lasso columns
    /// instead of a fresh initialization.
    pub warm_start: bool,
    /// Number of independently drawn balanced subsets whose heads are
    /// averaged.
    pub repeats: usize,
}

impl RetrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Phase 1: unbalanced fine-tuning of the whole network.
    pub erm: SgdConfig,
    /// Phase 2: group-lasso feature selection.
    pub selection: SelectionConfig,
    /// Phase 3 and the DFR baselines.
    pub dfr: RetrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::H2tDfr,
            seed: 0,
            data: DataConfig {
                source: DataSource::Synthetic,
                generator: SpuriousGenSpec::default(),
                csv: CsvPaths::default(),
            },
            model: ModelConfig {
                hidden: vec![64, 32, 16],
                batch_norm: true,
            },
            erm: SgdConfig {
                lr: 0.01,
                weight_decay: 1e-4,
                momentum: 0.9,
                epochs: 20,
                batch_size: 64,
            },
            selection: SelectionConfig {
                lr: 0.01,
                weight_decay: 0.0,
                momentum: 0.9,
                epochs: 30,
                batch_size: 64,
                lambda: 1e-3,
                tau: 0.2,
                target_size: 16,
                taps: TapSet::All,
                normalize: true,
                data: SelectionData::Balanced,
            },
            dfr: RetrainConfig {
                lr: 0.01,
                weight_decay: 1e-4,
                momentum: 0.9,
                epochs: 50,
                batch_size: 64,
                warm_start: false,
                repeats: 1,
            },
        }
    }
}

impl RunConfig {
    /// Range checks; messages name the offending key path.
    pub fn validate(&self) -> Result<()> {
        self.erm.validate("erm")?;
        self.selection.sgd().validate("selection")?;
        self.dfr.sgd().validate("dfr")?;
        let s = &self.selection;
        if !(s.tau > 0.0 && s.tau <= 1.0) {
            return Err(Error::Config(format!(
                "selection.tau: {} not in (0, 1]",
                s.tau
            )));
        }
        if s.lambda.is_nan() || s.lambda < 0.0 {
            return Err(Error::Config(format!(
                "selection.lambda: {} must be >= 0",
                s.lambda
            )));
        }
        if s.target_size == 0 {
            return Err(Error::Config("selection.target_size: must be >= 1".into()));
        }
        if self.dfr.repeats == 0 {
            return Err(Error::Config("dfr.repeats: must be >= 1".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config(
                "model.hidden: need at least one nonzero width".into(),
            ));
        }
        if self.method == Method::AffineDfr && !self.model.batch_norm {
            return Err(Error::Config(
                "model.batch_norm: affine-dfr needs BatchNorm layers".into(),
            ));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.generator.validate()?,
            DataSource::Csv => {
                for (k, p) in [
                    ("train", &self.data.csv.train),
                    ("val", &self.data.csv.val),
                    ("test", &self.data.csv.test),
                ] {
                    if p.is_empty() {
                        return Err(Error::Config(format!(
                            "data.csv.{k}: path required for csv source"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
