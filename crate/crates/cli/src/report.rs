//! JSON and markdown rendering of experiment reports.

use relabel_core::experiment::{Case, ExperimentReport};
use relabel_core::metrics::MetricsReport;
use relabel_core::relabel::{Mode, Strategy};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Markdown,
}

const COLUMNS: [&str; 6] = ["Sensitivity", "Specificity", "Precision", "Precision_b", "Accuracy", "F1"];

pub fn case_name(case: Case) -> &'static str {
    match case {
        Case::Case1ScenarioTrain => "case1_scenario_train",
        Case::Case2ReferenceCv => "case2_reference_cv",
        Case::Case3CrossTest => "case3_cross_test",
        Case::Case3FineTune => "case3_fine_tune",
        Case::RelabelRetrain => "relabel_retrain",
    }
}

/// Row label such as `relabel_retrain A comparator/substitute 1;2;3;4;5`.
pub fn method_label(report: &ExperimentReport) -> String {
    let spec = &report.spec;
    let mut label = String::from(case_name(spec.case));
    if let Some(s) = &spec.scenario {
        label.push(' ');
        label.push_str(s.name());
    }
    if let (Case::RelabelRetrain, Some(r)) = (spec.case, &spec.relabel) {
        let strategy = match r.strategy {
            Strategy::Annotator => "annotator",
            Strategy::Comparator => "comparator",
        };
        let mode = match r.mode {
            Mode::Substitute => "substitute",
            Mode::Consensus => "consensus",
        };
        let under = if r.include_uncertain { "1;2;3;4;5" } else { "1;2;4;5" };
        label.push_str(&format!(" {strategy}/{mode} {under}"));
    }
    label
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| String::from("n/a"), |x| format!("{x:.4}"))
}

fn row(label: &str, cells: impl IntoIterator<Item = String>) -> String {
    let mut line = format!("| {} |", label.replace('|', "\\|"));
    for c in cells {
        line.push_str(&format!(" {c} |"));
    }
    line.push('\n');
    line
}

fn table_header(first: &str, columns: &[&str]) -> String {
    let mut out = row(first, columns.iter().map(|c| c.to_string()));
    out.push_str(&row("---", columns.iter().map(|_| String::from("---"))));
    out
}

fn mean_std(mean: &MetricsReport, std: &MetricsReport) -> Vec<String> {
    mean.values()
        .iter()
        .zip(std.values())
        .map(|(m, s)| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => String::from("n/a"),
        })
        .collect()
}

pub fn render_markdown(reports: &[ExperimentReport], seed: u64) -> String {
    let mut out = format!("<!-- seed={seed} -->\n# Experiment report\n\n## Pooled metrics\n\n");
    out.push_str(&table_header("Method", &COLUMNS));
    for r in reports {
        out.push_str(&row(&method_label(r), r.aggregate.micro.values().into_iter().map(cell)));
    }
    out.push_str("\n## Per-fold mean ± std\n\n");
    out.push_str(&table_header("Method", &COLUMNS));
    for r in reports {
        out.push_str(&row(&method_label(r), mean_std(&r.aggregate.macro_mean, &r.aggregate.macro_std)));
    }
    out.push_str("\n## Pooled confusion matrices\n\n");
    out.push_str(&table_header("Method", &["TP", "FP", "TN", "FN", "Seeds", "Fold runs"]));
    for r in reports {
        let cm = r.aggregate.pooled;
        out.push_str(&row(
            &method_label(r),
            [cm.tp, cm.fp, cm.tn, cm.fn_, r.spec.seeds.len() as u64, r.per_seed.len() as u64].map(|v| v.to_string()),
        ));
    }
    out
}

#[derive(Serialize)]
struct ReportJson<'a> {
    seed: u64,
    #[serde(flatten)]
    report: &'a ExperimentReport,
}

pub fn render_json(reports: &[ExperimentReport], seed: u64) -> CliResult<String> {
    let docs: Vec<ReportJson<'_>> = reports.iter().map(|report| ReportJson { seed, report }).collect();
    let mut text = match docs.as_slice() {
        [single] => serde_json::to_string_pretty(single),
        many => serde_json::to_string_pretty(many),
    }
    .map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn render_report(reports: &[ExperimentReport], format: ReportFormat, seed: u64) -> CliResult<String> {
    match format {
        ReportFormat::Json => render_json(reports, seed),
        ReportFormat::Markdown => Ok(render_markdown(reports, seed)),
    }
}

/// Parses a report document: one report object or an array of them.
pub fn parse_reports(text: &str, source: &str) -> CliResult<Vec<ExperimentReport>> {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum Doc {
        One(Box<ExperimentReport>),
        Many(Vec<ExperimentReport>),
    }
    match serde_json::from_str::<Doc>(text).map_err(|e| CliError::data(format!("{source}: {e}")))? {
        Doc::One(r) => Ok(vec![*r]),
        Doc::Many(rs) => Ok(rs),
    }
}

/// Pooled-metrics rows of a rendered markdown report: label and six values
/// (`None` for "n/a").
pub fn parse_markdown_grid(markdown: &str) -> Vec<(String, [Option<f64>; 6])> {
    let section = markdown.split("## Pooled metrics").nth(1).unwrap_or("");
    let section = section.split("\n## ").next().unwrap_or("");
    section
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Method") && !l.starts_with("| ---"))
        .filter_map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split(" | ").map(str::trim).collect();
            let (label, values) = cells.split_first()?;
            let mut parsed = [None; 6];
            for (slot, v) in parsed.iter_mut().zip(values) {
                *slot = v.parse().ok();
            }
            Some((label.to_string(), parsed))
        })
        .collect()
}
