//! Results table in the layout "Worst-group accuracy / Mean group accuracy",
//! mean ± standard error over runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::artifacts::RunManifest;
use super::config::Method;
use super::metrics::MeanStderr;

/// Published ResNet-50 results (worst-group %, mean-group %) for the three
/// benchmark families the presets are named after. Shown as annotations
/// only; desk-scale runs are not expected to reach them.
pub const PUBLISHED_RESULTS: &[(&str, Method, &str, &str)] = &[
    ("celeba-like", Method::Dfr, "85.99 ± 0.74", "91.58 ± 0.15"),
    (
        "celeba-like",
        Method::AffineDfr,
        "85.49 ± 0.70",
        "91.55 ± 0.14",
    ),
    (
        "celeba-like",
        Method::H2tDfr,
        "88.59 ± 0.48",
        "91.87 ± 0.17",
    ),
    (
        "waterbirds-like",
        Method::Dfr,
        "92.76 ± 0.37",
        "94.54 ± 0.21",
    ),
    (
        "waterbirds-like",
        Method::AffineDfr,
        "89.02 ± 0.37",
        "94.13 ± 0.08",
    ),
    (
        "waterbirds-like",
        Method::H2tDfr,
        "90.85 ± 0.45",
        "93.51 ± 0.06",
    ),
    ("ham10000-like", Method::Dfr, "67.31 ± 2.61", "78.09 ± 0.91"),
    (
        "ham10000-like",
        Method::AffineDfr,
        "53.63 ± 2.84",
        "76.72 ± 0.68",
    ),
    (
        "ham10000-like",
        Method::H2tDfr,
        "69.69 ± 1.84",
        "78.23 ± 0.46",
    ),
];

pub fn published(dataset: &str, method: Method) -> Option<(&'static str, &'static str)> {
    PUBLISHED_RESULTS
        .iter()
        .find(|(d, m, _, _)| *d == dataset && *m == method)
        .map(|&(_, _, w, g)| (w, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    pub worst: MeanStderr,
    pub mean_group: MeanStderr,
    pub reference: Option<(&'static str, &'static str)>,
}

/// One row per (dataset label, method), runs aggregated across seeds.
pub fn collect_rows(manifests: &[RunManifest]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, Method), Vec<&RunManifest>> = BTreeMap::new();
    for m in manifests {
        groups
            .entry((m.dataset_label(), m.method))
            .or_default()
            .push(m);
    }
    groups
        .into_iter()
        .map(|((dataset, method), runs)| {
            let worst: Vec<f64> = runs.iter().map(|r| r.metrics.worst).collect();
            let mean: Vec<f64> = runs.iter().map(|r| r.metrics.mean_group).collect();
            ReportRow {
                reference: published(&dataset, method),
                dataset,
                method,
                worst: MeanStderr::of(&worst),
                mean_group: MeanStderr::of(&mean),
            }
        })
        .collect()
}

/// Plain-text table. The `±` column is left empty for single runs.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| {:<20} | {:<11} | {:>4} | {:>8} | {:>6} | {:>8} | {:>6} | {:<29} |",
        "Dataset", "Method", "Runs", "Worst %", "±", "Mean %", "±", "Published (worst / mean)"
    );
    let _ = writeln!(
        out,
        "|{}|{}|{}|{}|{}|{}|{}|{}|",
        "-".repeat(22),
        "-".repeat(13),
        "-".repeat(6),
        "-".repeat(10),
        "-".repeat(8),
        "-".repeat(10),
        "-".repeat(8),
        "-".repeat(31)
    );
    let se = |m: &MeanStderr| {
        m.stderr
            .map(|s| format!("{:.2}", 100.0 * s))
            .unwrap_or_default()
    };
    for r in rows {
        let reference = r
            .reference
            .map(|(w, g)| format!("{w} / {g}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "| {:<20} | {:<11} | {:>4} | {:>8.2} | {:>6} | {:>8.2} | {:>6} | {:<29} |",
            r.dataset,
            r.method.display_name(),
            r.worst.n,
            100.0 * r.worst.mean,
            se(&r.worst),
            100.0 * r.mean_group.mean,
            se(&r.mean_group),
            reference
        );
    }
    out
}
