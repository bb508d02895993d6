//! Config resolution for the `h2t` command line.
//!
//! A run config is built in layers, later layers winning:
//! built-in defaults, a named preset, a JSON config file, then
//! `--section.key=value` flags. Every leaf remembers which layer set it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use h2t_core::pipeline::{Method, RunConfig};
use serde_json::{json, Map, Value};

pub const PRESETS: [&str; 3] = ["waterbirds-like", "celeba-like", "ham10000-like"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Preset,
    File,
    Flag,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::Preset => "preset",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

/// Optimizer table for one (preset, method family) pair.
struct Table {
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    dfr_lr: f64,
    dfr_weight_decay: f64,
    dfr_momentum: f64,
    lambda: Option<f64>,
    epochs: usize,
    dfr_epochs: usize,
    batch_size: usize,
}

// DFR and Affine-DFR share one table; H2T-DFR has its own.
fn table(preset: &str, method: Method) -> Option<Table> {
    let h2t = method == Method::H2tDfr;
    let t = match (preset, h2t) {
        ("waterbirds-like", false) => Table {
            lr: 0.003,
            weight_decay: 0.0004,
            momentum: 0.9,
            dfr_lr: 0.0001,
            dfr_weight_decay: 0.0001,
            dfr_momentum: 0.9,
            lambda: None,
            epochs: 20,
            dfr_epochs: 100,
            batch_size: 32,
        },
        ("celeba-like", false) => Table {
            lr: 0.0005,
            weight_decay: 0.0001,
            momentum: 0.9,
            dfr_lr: 0.0001,
            dfr_weight_decay: 0.0001,
            dfr_momentum: 0.4,
            lambda: None,
            epochs: 6,
            dfr_epochs: 50,
            batch_size: 128,
        },
        ("ham10000-like", false) => Table {
            lr: 0.0003,
            weight_decay: 0.0001,
            momentum: 0.9,
            dfr_lr: 0.0005,
            dfr_weight_decay: 0.0004,
            dfr_momentum: 0.9,
            lambda: None,
            epochs: 100,
            dfr_epochs: 500,
            batch_size: 128,
        },
        ("waterbirds-like", true) => Table {
            lr: 0.0005,
            weight_decay: 0.0004,
            momentum: 0.9,
            dfr_lr: 0.0005,
            dfr_weight_decay: 0.0003,
            dfr_momentum: 0.9,
            lambda: Some(0.00001),
            epochs: 70,
            dfr_epochs: 500,
            batch_size: 32,
        },
        ("celeba-like", true) => Table {
            lr: 0.0005,
            weight_decay: 0.0001,
            momentum: 0.9,
            dfr_lr: 0.0005,
            dfr_weight_decay: 0.0003,
            dfr_momentum: 0.9,
            lambda: Some(0.00001),
            epochs: 20,
            dfr_epochs: 300,
            batch_size: 128,
        },
        ("ham10000-like", true) => Table {
            lr: 0.0003,
            weight_decay: 0.0001,
            momentum: 0.9,
            dfr_lr: 0.0005,
            dfr_weight_decay: 0.0004,
            dfr_momentum: 0.9,
            lambda: Some(0.0001),
            epochs: 100,
            dfr_epochs: 500,
            batch_size: 128,
        },
        _ => return None,
    };
    Some(t)
}

/// Config fragment a preset contributes for `method`. Fields the tables do
/// not define are absent and keep their defaults.
pub fn preset_patch(name: &str, method: Method) -> Result<Value> {
    let t = table(name, method)
        .ok_or_else(|| anyhow!("preset: unknown preset {name:?} (expected one of {PRESETS:?})"))?;
    let mut patch = json!({
        "erm": {
            "lr": t.lr,
            "weight_decay": t.weight_decay,
            "momentum": t.momentum,
            "epochs": t.epochs,
            "batch_size": t.batch_size,
        },
        "dfr": {
            "lr": t.dfr_lr,
            "weight_decay": t.dfr_weight_decay,
            "momentum": t.dfr_momentum,
            "epochs": t.dfr_epochs,
            "batch_size": t.batch_size,
        },
    });
    if let Some(lambda) = t.lambda {
        patch["selection"] = json!({ "lambda": lambda });
    }
    Ok(patch)
}

#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub preset: Option<String>,
    /// Dotted leaf path → layer that supplied its value.
    pub sources: BTreeMap<String, Source>,
}

impl ResolvedConfig {
    /// Resolution record stored in run manifests.
    pub fn provenance(&self) -> Value {
        let sources: Map<String, Value> = self
            .sources
            .iter()
            .map(|(k, s)| (k.clone(), Value::from(s.as_str())))
            .collect();
        let mut p = json!({ "preset": self.preset, "sources": sources });
        if let Some(t) = self
            .preset
            .as_deref()
            .and_then(|n| table(n, self.config.method))
        {
            p["preset_epochs"] = json!({ "erm": t.epochs, "dfr": t.dfr_epochs });
        }
        p
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_u64() => "unsigned integer",
        Value::Number(n) if n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(base: &Value, new: &Value) -> bool {
    match (base, new) {
        (Value::Number(b), Value::Number(n)) => !(b.is_u64() && !n.is_u64()),
        (Value::Bool(_), Value::Bool(_))
        | (Value::String(_), Value::String(_))
        | (Value::Array(_), Value::Array(_))
        | (Value::Object(_), Value::Object(_)) => true,
        _ => false,
    }
}

fn leaves(value: &Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Merges `patch` into `base`, rejecting keys `base` lacks and values whose
/// JSON type differs from the existing one.
fn merge(
    base: &mut Value,
    patch: &Value,
    prefix: &str,
    source: Source,
    sources: &mut BTreeMap<String, Source>,
) -> Result<()> {
    let Value::Object(patch) = patch else {
        bail!(
            "{}: expected an object, got {}",
            if prefix.is_empty() { "config" } else { prefix },
            kind(patch)
        );
    };
    for (key, value) in patch {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let slot = base
            .get_mut(key)
            .ok_or_else(|| anyhow!("{path}: unknown key"))?;
        if !compatible(slot, value) {
            bail!("{path}: expected {}, got {}", kind(slot), kind(value));
        }
        if slot.is_object() {
            merge(slot, value, &path, source, sources)?;
        } else {
            *slot = value.clone();
            sources.insert(path, source);
        }
    }
    Ok(())
}

/// Builds a one-leaf patch from a dotted path.
fn nest(path: &str, value: Value) -> Value {
    path.rsplit('.').fold(value, |acc, key| {
        let mut m = Map::new();
        m.insert(key.to_string(), acc);
        Value::Object(m)
    })
}

/// Parses the value side of `--section.key=value`: JSON when it parses,
/// otherwise a bare string.
pub fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Dotted config path and its raw value.
pub type Override = (String, String);

/// Pulls `--a.b=value` overrides out of an argument list. Everything else is
/// returned untouched for the regular argument parser.
pub fn split_overrides<I: IntoIterator<Item = String>>(
    args: I,
) -> Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--") {
            Some(body) if body.split('=').next().is_some_and(|k| k.contains('.')) => {
                let (key, value) = body.split_once('=').ok_or_else(|| {
                    anyhow!("{body}: override needs the form --section.key=value")
                })?;
                overrides.push((key.to_string(), value.to_string()));
            }
            _ => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

/// Resolves defaults < preset < file < flags into a validated config.
/// `flags` holds dotted paths (top-level keys such as `seed` included).
pub fn resolve(
    method: Method,
    preset: Option<&str>,
    file: Option<&Path>,
    flags: &[(String, Value)],
) -> Result<ResolvedConfig> {
    let defaults = RunConfig {
        method,
        ..RunConfig::default()
    };
    let mut value = serde_json::to_value(&defaults)?;
    let mut paths = Vec::new();
    leaves(&value, "", &mut paths);
    let mut sources: BTreeMap<String, Source> =
        paths.into_iter().map(|p| (p, Source::Default)).collect();
    sources.insert("method".into(), Source::Flag);

    if let Some(name) = preset {
        merge(
            &mut value,
            &preset_patch(name, method)?,
            "",
            Source::Preset,
            &mut sources,
        )?;
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        if !text.trim().is_empty() {
            let patch: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, &patch, "", Source::File, &mut sources)?;
        }
    }
    for (path, v) in flags {
        merge(
            &mut value,
            &nest(path, v.clone()),
            "",
            Source::Flag,
            &mut sources,
        )?;
    }
    // The subcommand decides the method even if a file says otherwise.
    value["method"] = serde_json::to_value(method)?;

    // Deserialize leaf by leaf first so enum and range errors name the key.
    for (path, source) in &sources {
        if *source == Source::Default {
            continue;
        }
        let leaf = path.split('.').fold(&value, |v, k| &v[k]).clone();
        let mut probe = serde_json::to_value(&defaults)?;
        merge(
            &mut probe,
            &nest(path, leaf),
            "",
            *source,
            &mut BTreeMap::new(),
        )?;
        serde_json::from_value::<RunConfig>(probe).map_err(|e| anyhow!("{path}: {e}"))?;
    }
    let config: RunConfig = serde_json::from_value(value)?;
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(ResolvedConfig {
        config,
        preset: preset.map(str::to_string),
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, Value)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), parse_flag_value(v)))
            .collect()
    }

    #[test]
    fn celeba_preset_sets_phase_one() {
        let r = resolve(Method::Dfr, Some("celeba-like"), None, &[]).unwrap();
        assert_eq!(r.config.erm.lr, 0.0005);
        assert_eq!(r.config.erm.batch_size, 128);
        assert_eq!(r.config.erm.epochs, 6);
        assert_eq!(r.config.dfr.momentum, 0.4);
        assert_eq!(r.sources["erm.lr"], Source::Preset);
        assert_eq!(r.sources["selection.tau"], Source::Default);
    }

    #[test]
    fn h2t_presets_carry_lambda() {
        let wb = resolve(Method::H2tDfr, Some("waterbirds-like"), None, &[]).unwrap();
        assert_eq!(wb.config.selection.lambda, 1e-5);
        assert_eq!(wb.config.erm.epochs, 70);
        assert_eq!(wb.config.dfr.epochs, 500);
        let ham = resolve(Method::H2tDfr, Some("ham10000-like"), None, &[]).unwrap();
        assert_eq!(ham.config.selection.lambda, 1e-4);
        let p = ham.provenance();
        assert_eq!(p["preset_epochs"]["dfr"], 500);
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"erm": {"lr": 0.02, "epochs": 3}}"#).unwrap();
        let r = resolve(
            Method::Erm,
            Some("celeba-like"),
            Some(&file),
            &flags(&[("erm.epochs", "9")]),
        )
        .unwrap();
        assert_eq!(r.config.erm.lr, 0.02);
        assert_eq!(r.config.erm.epochs, 9);
        assert_eq!(r.config.erm.batch_size, 128);
        assert_eq!(r.sources["erm.lr"], Source::File);
        assert_eq!(r.sources["erm.epochs"], Source::Flag);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("empty.json");
        std::fs::write(&file, "").unwrap();
        let r = resolve(Method::H2tDfr, None, Some(&file), &[]).unwrap();
        assert_eq!(r.config, RunConfig::default());
    }

    #[test]
    fn errors_name_the_key() {
        let err = resolve(
            Method::H2tDfr,
            None,
            None,
            &flags(&[("selection.tau", "1.5")]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("selection.tau"), "{err}");
        let err = resolve(Method::Dfr, None, None, &flags(&[("dfr.bogus", "1")])).unwrap_err();
        assert_eq!(err.to_string(), "dfr.bogus: unknown key");
        let err = resolve(Method::Dfr, None, None, &flags(&[("erm.epochs", "2.5")])).unwrap_err();
        assert!(
            err.to_string()
                .starts_with("erm.epochs: expected unsigned integer"),
            "{err}"
        );
        let err = resolve(
            Method::Dfr,
            None,
            None,
            &flags(&[("selection.taps", "some")]),
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("selection.taps:"), "{err}");
        assert!(resolve(Method::Dfr, Some("imagenet"), None, &[]).is_err());
    }

    #[test]
    fn overrides_are_split_out() {
        let args = [
            "h2t",
            "dfr",
            "--preset=celeba-like",
            "--erm.lr=0.1",
            "--seed",
            "3",
        ]
        .map(String::from);
        let (rest, over) = split_overrides(args).unwrap();
        assert_eq!(rest, ["h2t", "dfr", "--preset=celeba-like", "--seed", "3"]);
        assert_eq!(over, vec![("erm.lr".to_string(), "0.1".to_string())]);
        assert!(split_overrides(["--erm.lr".to_string()]).is_err());
    }

    #[test]
    fn flag_values_parse_as_json_or_string() {
        assert_eq!(parse_flag_value("1.5"), json!(1.5));
        assert_eq!(parse_flag_value("[8,4]"), json!([8, 4]));
        assert_eq!(parse_flag_value("train"), json!("train"));
    }
}
