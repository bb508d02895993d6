//! JSON checkpoints. Floats are written in shortest round-trip form and
//! parsed exactly, so load → save reproduces the file byte for byte.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::MlpModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "h2t-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: MlpModel,
}

impl Checkpoint {
    pub fn new(model: MlpModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
        }
    }

    pub fn to_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format `{}`",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::new(model.clone()).to_string()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint::parse(&text)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn load_then_save_is_byte_identical() {
        let mut rng = stream_rng(11, Stream::Init);
        let mut model = MlpModel::mlp(4, &[6, 3], 2, true, &mut rng).unwrap();
        model.push_lineage("init:seed=11");
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_checkpoint(&model, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, model);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn wrong_version_rejected() {
        let mut rng = stream_rng(0, Stream::Init);
        let model = MlpModel::mlp(2, &[2], 2, false, &mut rng).unwrap();
        let mut ck = Checkpoint::new(model);
        ck.version = 99;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(matches!(
            Checkpoint::parse(&text),
            Err(Error::Checkpoint(_))
        ));
    }
}
