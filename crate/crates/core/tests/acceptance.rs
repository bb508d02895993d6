//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use h2t_core::data::{balanced_batches, balanced_subset, shuffled_batches, GroupedDataset, Split};
use h2t_core::nn::{
    backward, changed_params, grad_check, sgd_step, Dense, Layer, MlpModel, Mode, MomentumState,
    ParamId, ParamKind, SgdConfig, TrainableMask,
};
use h2t_core::pipeline::{
    affine_dfr, dfr_retrain, erm_finetune, evaluate_groups, h2t_retrain, h2t_select, init_model,
    prepare_data, retrain_sets, run, run_with_phase1, Classifier, Method, RunConfig, SelectionData,
    Splits,
};
use h2t_core::rng::{stream_rng, Stream};
use h2t_core::selection::{
    group_lasso_penalty, select_top_fraction, train_linear_head, write_histogram_csv, Batching,
    TapSet,
};
use h2t_core::{Execution, Matrix};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = stream_rng(2024, Stream::Init);
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut nets = 0;
    for i in 0..12 {
        let inputs = rng.random_range(2..6);
        let depth = rng.random_range(1..4);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..7)).collect();
        let classes = rng.random_range(2..4);
        let batch_norm = i % 2 == 0;
        let model = MlpModel::mlp(inputs, &hidden, classes, batch_norm, &mut rng)
            .map_err(|e| e.to_string())?;
        let x = random_matrix(8, inputs, &mut rng);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..classes)).collect();
        let modes: &[Mode] = if batch_norm {
            &[Mode::Train, Mode::Inference]
        } else {
            &[Mode::Train]
        };
        for &mode in modes {
            let decay = if i % 3 == 0 { 1e-3 } else { 0.0 };
            let report =
                grad_check(&model, &x, &labels, mode, decay, 1e-4).map_err(|e| e.to_string())?;
            if !report.passed() {
                return Err(format!(
                    "net {i} ({mode:?}) max rel error {:.3e}",
                    report.max_rel_error()
                ));
            }
            worst = worst.max(report.max_rel_error());
            worst_abs = report
                .tensors
                .iter()
                .map(|t| t.max_abs_error)
                .fold(worst_abs, f64::max);
            nets += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 10.0,
        format!("{nets} checks on 12 nets, max rel error {worst:.2e} (max abs {worst_abs:.1e}), {secs:.2}s"),
        format!("took {secs:.2}s"),
    )
}

fn group_lasso_oracle() -> Outcome {
    let mut rng = stream_rng(7, Stream::Selection);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (c, d) = (rng.random_range(1..5), rng.random_range(1..30));
        let mut w = random_matrix(c, d, &mut rng);
        if d > 1 {
            for k in 0..c {
                w[(k, 0)] = 0.0;
            }
        }
        let (value, grad) = group_lasso_penalty(&w);
        let norms: Vec<f64> = (0..d)
            .map(|i| w.column(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let expected: f64 = norms.iter().sum();
        let rel = |a: f64, b: f64| {
            if a == b {
                0.0
            } else {
                (a - b).abs() / a.abs().max(b.abs())
            }
        };
        worst = worst.max(rel(value, expected));
        for i in 0..d {
            for k in 0..c {
                let g = if norms[i] == 0.0 {
                    0.0
                } else {
                    w[(k, i)] / norms[i]
                };
                worst = worst.max(rel(grad[(k, i)], g));
            }
        }
    }
    if worst > 1e-10 {
        return Err(format!("penalty/gradient relative error {worst:.2e}"));
    }

    // λ = 0 against a hand-rolled unregularized loop sharing every seed.
    let mut rng = stream_rng(11, Stream::DataTrain);
    let x = random_matrix(60, 5, &mut rng);
    let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let cfg = SgdConfig {
        lr: 0.05,
        weight_decay: 1e-3,
        momentum: 0.9,
        epochs: 5,
        batch_size: 16,
    };
    let init = Dense::init(5, 3, &mut stream_rng(3, Stream::SelectionInit));
    let trained = train_linear_head(
        &x,
        &y,
        Batching::Shuffled,
        &cfg,
        0.0,
        init.clone(),
        &mut stream_rng(3, Stream::Selection),
    )
    .map_err(|e| e.to_string())?;

    let mut model = MlpModel::new(vec![Layer::Dense(init)]).unwrap();
    let mask = TrainableMask::all(&model);
    let mut state = MomentumState::default();
    let mut batch_rng = stream_rng(3, Stream::Selection);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        let batches = shuffled_batches(60, cfg.batch_size, &mut batch_rng);
        let mut total = 0.0;
        for b in &batches {
            let xb = x.select_rows(b);
            let yb: Vec<usize> = b.iter().map(|&i| y[i]).collect();
            let out = backward(&model, &xb, &yb, &mask, Mode::Train, 0.0).unwrap();
            sgd_step(&mut model, &out.gradients, &mut state, &cfg, &mask).unwrap();
            total += out.loss;
        }
        losses.push(total / batches.len() as f64);
    }
    let same_head = trained
        .head
        .weights
        .as_slice()
        .iter()
        .zip(model.head().weights.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && trained
            .head
            .bias
            .iter()
            .zip(&model.head().bias)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let same_losses = trained
        .epoch_losses
        .iter()
        .zip(&losses)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        same_head && same_losses,
        format!(
            "50 random W, max rel error {worst:.1e}; λ=0 trajectory bit-identical over {} epochs",
            cfg.epochs
        ),
        "λ=0 trajectory diverged from unregularized training".into(),
    )
}

fn brute_force_select(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

fn selection_oracle() -> Outcome {
    let mut rng = stream_rng(5, Stream::Selection);
    // τ as hundredths, so floor(τ·D) is exact integer arithmetic here.
    let taus = [(0.01, 1usize), (0.05, 5), (0.5, 50), (1.0, 100)];
    let mut cases = 0;
    for v in 0..100 {
        let d = rng.random_range(1..400);
        let scores: Vec<f64> = (0..d)
            .map(|_| match v % 3 {
                0 => rng.random_range(0..5) as f64 * 0.25,
                1 => rng.random_range(0.0..1.0),
                _ => {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random_range(0..20) as f64
                    }
                }
            })
            .collect();
        for &(tau, hundredths) in &taus {
            let k = (hundredths * d / 100).max(1);
            let got = select_top_fraction(&scores, tau).map_err(|e| e.to_string())?;
            let popcount = got.iter().filter(|&&b| b).count();
            if popcount != k {
                return Err(format!("D={d} τ={tau}: popcount {popcount}, expected {k}"));
            }
            if got != brute_force_select(&scores, k) {
                return Err(format!("D={d} τ={tau}: mask differs from brute force"));
            }
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} (vector, τ) cases match brute force; popcounts exact"
    ))
}

fn dfr_equivalence(cfg: &RunConfig, splits: &Splits, phase1: &MlpModel) -> Outcome {
    let exec = Execution::default();
    let sets = retrain_sets(splits, 1, cfg.seed).map_err(|e| e.to_string())?;
    let dfr = dfr_retrain(phase1, &sets, &cfg.dfr, cfg.seed, exec).map_err(|e| e.to_string())?;

    let mut sel_cfg = cfg.selection.clone();
    sel_cfg.taps = TapSet::Penultimate;
    sel_cfg.tau = 1.0;
    sel_cfg.lambda = 0.0;
    sel_cfg.normalize = true;
    sel_cfg.target_size = phase1.penultimate_dim();
    sel_cfg.data = SelectionData::Balanced;
    let selection =
        h2t_select(phase1, splits, &sel_cfg, cfg.seed, exec).map_err(|e| e.to_string())?;
    let (head, _) = h2t_retrain(phase1, &selection, &sets, &cfg.dfr, cfg.seed, exec)
        .map_err(|e| e.to_string())?;

    let a = Classifier::Network(dfr.model)
        .predict(splits.test.features(), exec)
        .map_err(|e| e.to_string())?;
    let b = Classifier::H2t {
        backbone: phase1.clone(),
        head,
    }
    .predict(splits.test.features(), exec)
    .map_err(|e| e.to_string())?;
    let mismatches = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    check(
        mismatches == 0,
        format!("0 mismatches over {} test rows", a.len()),
        format!("{mismatches} mismatches over {} test rows", a.len()),
    )
}

fn freezing_audits(cfg: &RunConfig, splits: &Splits, phase1: &MlpModel) -> Outcome {
    let exec = Execution::default();
    let head = phase1.head_index();
    let sets = retrain_sets(splits, 1, cfg.seed).map_err(|e| e.to_string())?;

    let dfr = dfr_retrain(phase1, &sets, &cfg.dfr, cfg.seed, exec).map_err(|e| e.to_string())?;
    let changed = changed_params(phase1, &dfr.model);
    if changed.iter().any(|id| id.layer != head) || changed.is_empty() {
        return Err(format!("DFR changed {changed:?}"));
    }

    let affine =
        affine_dfr(phase1, &splits.val_rw, &cfg.dfr, cfg.seed).map_err(|e| e.to_string())?;
    let changed = changed_params(phase1, &affine.model);
    let allowed =
        |id: &ParamId| id.layer == head || matches!(id.kind, ParamKind::Gamma | ParamKind::Beta);
    if changed.iter().any(|id| !allowed(id))
        || !changed.iter().any(|id| id.kind == ParamKind::Gamma)
    {
        return Err(format!("Affine-DFR changed {changed:?}"));
    }
    for (before, after) in phase1.layers().iter().zip(affine.model.layers()) {
        if let (Layer::BatchNorm(b), Layer::BatchNorm(a)) = (before, after) {
            if b.running_mean != a.running_mean || b.running_var != a.running_var {
                return Err("Affine-DFR moved BatchNorm running statistics".into());
            }
        }
    }

    let backbone = phase1.clone();
    let selection =
        h2t_select(&backbone, splits, &cfg.selection, cfg.seed, exec).map_err(|e| e.to_string())?;
    let (h2t, _) = h2t_retrain(&backbone, &selection, &sets, &cfg.dfr, cfg.seed, exec)
        .map_err(|e| e.to_string())?;
    let backbone_same = changed_params(phase1, &backbone).is_empty() && &backbone == phase1;
    let recipe_same =
        h2t.extractor == selection.extractor && h2t.columns == selection.result.selected();
    let head_new = h2t.head.weights.cols() == h2t.columns.len();
    check(
        backbone_same && recipe_same && head_new,
        "DFR: head only; Affine-DFR: {γ, β, head}, running stats fixed; H2T-DFR phase 3: new head only".into(),
        format!("H2T phase 3: backbone unchanged {backbone_same}, recipe unchanged {recipe_same}, head fits selection {head_new}"),
    )
}

fn balanced_subset_invariant() -> Outcome {
    let mut rng = stream_rng(99, Stream::Subset);
    for case in 0..50 {
        let counts: Vec<usize> = (0..4).map(|_| rng.random_range(1..120)).collect();
        let mut labels = Vec::new();
        let mut attrs = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(g / 2, c));
            attrs.extend(std::iter::repeat_n(g % 2, c));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let attrs: Vec<usize> = order.iter().map(|&i| attrs[i]).collect();
        let n = labels.len();
        let x = random_matrix(n, 2, &mut rng);
        let data =
            GroupedDataset::new(x, labels, attrs, 2, 2, Split::Val).map_err(|e| e.to_string())?;
        let subset = balanced_subset(&data, case).map_err(|e| e.to_string())?;
        let min = *counts.iter().min().unwrap();
        let got = subset.group_stats().counts;
        if got.iter().any(|&c| c != min) {
            return Err(format!("counts {counts:?} gave {got:?}"));
        }

        let groups = subset.groups();
        for bs in [4, 8, 32] {
            let batches = balanced_batches(&groups, 4, bs, &mut rng);
            if batches.is_empty() {
                return Err(format!("batch size {bs}: no batches for {got:?}"));
            }
            for batch in batches {
                let mut per = [0usize; 4];
                for &i in &batch {
                    per[groups[i]] += 1;
                }
                if per.iter().any(|&c| c != per[0]) || (min >= bs / 4 && per[0] != bs / 4) {
                    return Err(format!("batch size {bs}: per-group counts {per:?}"));
                }
            }
        }
    }
    Ok(
        "50 count vectors balanced to the minimum; batches of 4/8/32 over each subset split evenly"
            .into(),
    )
}

fn determinism(cfg: &RunConfig) -> Outcome {
    let mut c = cfg.clone();
    c.method = Method::H2tDfr;
    let a = run(&c, Execution::default()).map_err(|e| e.to_string())?;
    let b = run(&c, Execution::Sequential).map_err(|e| e.to_string())?;
    let ja = a.metrics.to_json().map_err(|e| e.to_string())?;
    let jb = b.metrics.to_json().map_err(|e| e.to_string())?;
    c.seed += 1;
    let other = run(&c, Execution::default()).map_err(|e| e.to_string())?;
    let identical = ja == jb;
    let losses_differ = other.erm_losses != a.erm_losses;
    check(
        identical && losses_differ,
        "repeat runs give byte-identical metrics JSON; seeds 0/1 give different phase-1 losses"
            .into(),
        format!("metrics identical {identical}, phase-1 losses differ {losses_differ}"),
    )
}

struct SeedResult {
    worst: [f64; 4],
    non_final: f64,
    histogram_sum: f64,
    balanced_counts: Vec<usize>,
    train_counts: Vec<usize>,
}

fn run_seed(base: &RunConfig, seed: u64, dir: &std::path::Path) -> Result<SeedResult, String> {
    let mut c = base.clone();
    c.seed = seed;
    c.method = Method::Erm;
    let erm = run(&c, Execution::Sequential).map_err(|e| e.to_string())?;
    let mut worst = [erm.metrics.worst, 0.0, 0.0, 0.0];
    let mut non_final = 0.0;
    let mut histogram_sum = 0.0;
    let mut balanced_counts = Vec::new();
    for (slot, method) in [
        (1, Method::Dfr),
        (2, Method::AffineDfr),
        (3, Method::H2tDfr),
    ] {
        c.method = method;
        let out = run_with_phase1(&c, Some(erm.phase1.clone()), Execution::Sequential)
            .map_err(|e| e.to_string())?;
        worst[slot] = out.metrics.worst;
        if let Some(sel) = &out.selection {
            non_final = sel.histogram.non_final_mass();
            balanced_counts = sel.histogram.counts.clone();
            let path = dir.join(format!("histogram_{seed}.csv"));
            write_histogram_csv(&sel.histogram, &path).map_err(|e| e.to_string())?;
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            histogram_sum = text
                .lines()
                .skip(1)
                .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
                .sum();
        }
    }
    let splits = prepare_data(&c).map_err(|e| e.to_string())?;
    let mut train_cfg = c.selection.clone();
    train_cfg.data = SelectionData::Train;
    let unbalanced = h2t_select(
        &erm.phase1,
        &splits,
        &train_cfg,
        seed,
        Execution::Sequential,
    )
    .map_err(|e| e.to_string())?;
    Ok(SeedResult {
        worst,
        non_final,
        histogram_sum,
        balanced_counts,
        train_counts: unbalanced.result.histogram.counts,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark(cfg: &RunConfig) -> (Outcome, Outcome) {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let results: Result<Vec<SeedResult>, String> = Execution::default()
        .map_jobs((0..5).collect(), |seed| run_seed(cfg, seed, dir.path()))
        .into_iter()
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let results = match results {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let m = |i: usize| 100.0 * mean(results.iter().map(|r| r.worst[i]));
    let (erm, dfr, affine, h2t) = (m(0), m(1), m(2), m(3));
    let erm_max = 100.0 * results.iter().map(|r| r.worst[0]).fold(0.0, f64::max);
    let min_non_final = results.iter().map(|r| r.non_final).fold(1.0, f64::min);
    let a = erm_max < 70.0;
    let b = dfr - erm >= 5.0;
    let c = h2t >= dfr - 1.0 && min_non_final >= 0.05;
    let summary = format!(
        "worst-group % ERM {erm:.1} (max {erm_max:.1}), DFR {dfr:.1}, Affine-DFR {affine:.1}, H2T-DFR {h2t:.1}; \
         min non-final mass {min_non_final:.2}; {secs:.1}s"
    );
    let directional = if a && b && c && secs < 300.0 {
        Ok(summary)
    } else {
        Err(format!(
            "(a) {a} (b) {b} (c) {c} time {}: {summary}",
            secs < 300.0
        ))
    };

    let sums_ok = results
        .iter()
        .all(|r| (r.histogram_sum - 1.0).abs() <= 1e-9);
    let differing = results
        .iter()
        .filter(|r| r.train_counts != r.balanced_counts)
        .count();
    let shift: Vec<String> = results
        .iter()
        .map(|r| format!("{:?}->{:?}", r.balanced_counts, r.train_counts))
        .collect();
    let histogram = check(
        sums_ok && differing >= 1,
        format!("CSV sums to 1; train-set selection differs on {differing}/5 seeds (balanced->train counts {})", shift.join(" ")),
        format!("sums ok {sums_ok}, differing seeds {differing}"),
    );
    (directional, histogram)
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let setup = (|| -> Result<(Splits, MlpModel), String> {
        let splits = prepare_data(&cfg).map_err(|e| e.to_string())?;
        let model = init_model(
            &cfg.model,
            splits.train.dim(),
            splits.train.classes(),
            cfg.seed,
        )
        .map_err(|e| e.to_string())?;
        let phase1 = erm_finetune(model, &splits.train, &cfg.erm, cfg.seed)
            .map_err(|e| e.to_string())?
            .model;
        Ok((splits, phase1))
    })();
    let (splits, phase1) = match setup {
        Ok(s) => s,
        Err(e) => {
            println!("FAIL setup: {e}");
            return ExitCode::FAILURE;
        }
    };
    let sanity = evaluate_groups(
        &Classifier::Network(phase1.clone()),
        &splits.test,
        Execution::default(),
    );
    if sanity.is_err() {
        println!("FAIL setup: phase-1 model cannot be evaluated");
        return ExitCode::FAILURE;
    }

    let (directional, histogram) = benchmark(&cfg);
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient suite", gradient_suite()),
        ("group-lasso oracle", group_lasso_oracle()),
        ("selection oracle", selection_oracle()),
        ("DFR equivalence", dfr_equivalence(&cfg, &splits, &phase1)),
        ("freezing audits", freezing_audits(&cfg, &splits, &phase1)),
        ("balanced-subset invariant", balanced_subset_invariant()),
        ("determinism", determinism(&cfg)),
        ("directional benchmark", directional),
        ("layer histogram", histogram),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
