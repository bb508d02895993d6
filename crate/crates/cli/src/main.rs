use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use h2t_cli::{parse_flag_value, resolve, split_overrides, ResolvedConfig};
use h2t_core::data::generate;
use h2t_core::pipeline::{
    collect_rows, load_phase1, read_manifest, render_table, replay_eval, run_with_phase1,
    write_generated, write_run, Method, RunManifest, SelectionData, SweepSummary,
};
use h2t_core::Execution;
use serde_json::{json, Value};

const ARTIFACT_ROOT_ENV: &str = "H2T_ARTIFACT_ROOT";

/// Group-robust last-layer retraining on synthetic spurious-correlation data.
///
/// Any config leaf can be overridden with `--section.key=value`, e.g.
/// `--selection.tau=0.1` or `--model.hidden=[32,16]`.
#[derive(Parser)]
#[command(name = "h2t", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test CSV splits.
    Generate(ConfigArgs),
    /// Unbalanced fine-tuning only.
    Erm(RunArgs),
    /// Last-layer retraining on balanced held-out data.
    Dfr(RunArgs),
    /// BatchNorm scale/shift plus head retraining.
    AffineDfr(RunArgs),
    /// All-layer feature selection followed by balanced retraining.
    H2tDfr(H2tArgs),
    /// Re-evaluate a stored run and compare with its recorded metrics.
    Eval(EvalArgs),
    /// Run seeds 0..k-1 and aggregate.
    Sweep(SweepArgs),
    /// Tabulate stored runs.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter preset (waterbirds-like, celeba-like, ham10000-like).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults under $H2T_ARTIFACT_ROOT, else ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Reuse the phase-1 checkpoint of an earlier run directory.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Clone)]
struct H2tArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Select features on an unbalanced set instead of the balanced one.
    #[arg(long, value_name = "SET", num_args = 0..=1, default_missing_value = "train")]
    unbalanced_selection: Option<UnbalancedSet>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum UnbalancedSet {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding manifest.json.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seeds: u64,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or sweep directories to scan (defaults to the artifact root).
    dirs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn resolve_args(
    method: Method,
    args: &ConfigArgs,
    overrides: &[(String, String)],
) -> Result<ResolvedConfig> {
    let mut flags: Vec<(String, Value)> = overrides
        .iter()
        .map(|(k, v)| (k.clone(), parse_flag_value(v)))
        .collect();
    if let Some(seed) = args.seed {
        flags.push(("seed".into(), json!(seed)));
    }
    resolve(
        method,
        args.preset.as_deref(),
        args.config.as_deref(),
        &flags,
    )
}

fn run_dir(args: &ConfigArgs, method: Method, seed: u64) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| artifact_root().join(format!("{}-seed{seed}", method.as_str())))
}

fn run_one(
    method: Method,
    args: &RunArgs,
    overrides: &[(String, String)],
    tweak: impl FnOnce(&mut ResolvedConfig),
) -> Result<Value> {
    let mut resolved = resolve_args(method, &args.config, overrides)?;
    tweak(&mut resolved);
    let phase1 = match &args.from {
        Some(dir) => Some(load_phase1(dir)?),
        None => None,
    };
    let cfg = &resolved.config;
    let outcome = run_with_phase1(cfg, phase1, execution(args.sequential))?;
    let dir = run_dir(&args.config, method, cfg.seed);
    let mut provenance = resolved.provenance();
    if let Some(from) = &args.from {
        provenance["phase1_from"] = json!(from.display().to_string());
    }
    let manifest = write_run(&outcome, &dir, Some(provenance))?;
    Ok(json!({
        "run": dir.display().to_string(),
        "method": method.as_str(),
        "seed": manifest.seed,
        "metrics": manifest.metrics,
    }))
}

fn find_manifests(dir: &Path, out: &mut Vec<RunManifest>) -> Result<()> {
    if dir.join("manifest.json").is_file() {
        out.push(read_manifest(dir)?);
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_manifests(&e, out)?;
    }
    Ok(())
}

fn execute(command: Command, overrides: &[(String, String)]) -> Result<Value> {
    match command {
        Command::Generate(args) => {
            let resolved = resolve_args(Method::Erm, &args, overrides)?;
            let mut spec = resolved.config.data.generator.clone();
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let dir = args
                .out
                .clone()
                .unwrap_or_else(|| artifact_root().join("data"));
            let splits = generate(&spec)?;
            let manifest = write_generated(&spec, &splits, &dir)?;
            Ok(json!({ "data": dir.display().to_string(), "group_counts": manifest.group_counts }))
        }
        Command::Erm(args) => run_one(Method::Erm, &args, overrides, |_| {}),
        Command::Dfr(args) => run_one(Method::Dfr, &args, overrides, |_| {}),
        Command::AffineDfr(args) => run_one(Method::AffineDfr, &args, overrides, |_| {}),
        Command::H2tDfr(args) => run_one(Method::H2tDfr, &args.run, overrides, |r| {
            if let Some(set) = args.unbalanced_selection {
                r.config.selection.data = match set {
                    UnbalancedSet::Train => SelectionData::Train,
                    UnbalancedSet::Val => SelectionData::Val,
                };
                r.sources
                    .insert("selection.data".into(), h2t_cli::Source::Flag);
            }
        }),
        Command::Eval(args) => {
            let replay = replay_eval(&args.run, execution(args.sequential))?;
            if !replay.matches() {
                bail!(
                    "{}: replayed metrics differ from metrics.json\nstored: {}\nreplayed: {}",
                    args.run.display(),
                    replay.stored_json.trim(),
                    replay.replayed_json.trim()
                );
            }
            Ok(
                json!({ "run": args.run.display().to_string(), "match": true, "metrics": replay.metrics }),
            )
        }
        Command::Sweep(args) => {
            if args.seeds == 0 {
                bail!("seeds: must be >= 1");
            }
            let base = resolve_args(args.method, &args.config, overrides)?;
            let root =
                args.config.out.clone().unwrap_or_else(|| {
                    artifact_root().join(format!("sweep-{}", args.method.as_str()))
                });
            let seeds: Vec<u64> = (0..args.seeds).collect();
            let results =
                execution(args.sequential).map_jobs(seeds.clone(), |seed| -> Result<RunManifest> {
                    let mut resolved = base.clone();
                    resolved.config.seed = seed;
                    resolved
                        .sources
                        .insert("seed".into(), h2t_cli::Source::Flag);
                    let outcome = run_with_phase1(&resolved.config, None, Execution::Sequential)?;
                    Ok(write_run(
                        &outcome,
                        &root.join(format!("seed{seed}")),
                        Some(resolved.provenance()),
                    )?)
                });
            let manifests = results.into_iter().collect::<Result<Vec<_>>>()?;
            let metrics: Vec<_> = manifests.iter().map(|m| &m.metrics).collect();
            let summary = SweepSummary::from_metrics(args.method, seeds, &metrics);
            let mut text = serde_json::to_string_pretty(&summary)?;
            text.push('\n');
            std::fs::write(root.join("aggregate.json"), text)?;
            Ok(json!({ "sweep": root.display().to_string(), "aggregate": summary }))
        }
        Command::Report(args) => {
            let dirs = if args.dirs.is_empty() {
                vec![artifact_root()]
            } else {
                args.dirs
            };
            let mut manifests = Vec::new();
            for d in &dirs {
                find_manifests(d, &mut manifests)?;
            }
            if manifests.is_empty() {
                bail!("no manifest.json found under {dirs:?}");
            }
            let table = render_table(&collect_rows(&manifests));
            let _ = write!(std::io::stdout(), "{table}");
            if let Some(out) = &args.out {
                std::fs::write(out, &table)?;
            }
            Ok(Value::Null)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args()) {
        Ok(split) => split,
        Err(e) => return fail(&e),
    };
    let cli = Cli::parse_from(args);
    match execute(cli.command, &overrides) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            // a closed pipe (e.g. `| head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(error: &anyhow::Error) -> ExitCode {
    // Core errors already embed their source in the message; skip repeats.
    let mut chain: Vec<String> = Vec::new();
    for cause in error.chain().map(|c| c.to_string()) {
        if !chain.last().is_some_and(|prev| prev.ends_with(&cause)) {
            chain.push(cause);
        }
    }
    eprintln!(
        "{}",
        json!({ "error": chain.join(": "), "status": "failed" })
    );
    ExitCode::from(2)
}
