use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use relabel_core::dataset::{self, LabelCounts};
use relabel_core::experiment::{self, Case, Datasets};
use relabel_core::net::{self, Example, Head};
use relabel_core::relabel::{self, Relabeler, Strategy};
use relabel_core::siamese;
use relabel_core::{synth, Label, NetParams, RelabelOutcome, SampleRecord};
use serde::Serialize;

use crate::config::{Overrides, PipelineConfig};
use crate::error::{CliError, CliResult, Context};
use crate::io::{self, Outputs};
use crate::report::{self, ReportFormat};

#[derive(Debug, Parser)]
#[command(name = "relabel", version, about = "Re-label noisily rated data against a verified reference set")]
pub struct Cli {
    /// Pipeline config JSON; explicit flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic noisy set, reference set and ground truth
    Generate,
    /// Apply a scenario to the noisy set's average scores
    AssignLabels {
        /// Dataset to label [default: the noisy set]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the sigmoid classifier (scenario labels if a scenario is set,
    /// verified labels otherwise)
    TrainClassifier {
        /// Training data [default: the reference set]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the embedding network with the contrastive loss
    TrainSiamese {
        /// Training data [default: the reference set]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Relabel the noisy set against the reference set
    Relabel {
        /// Trained parameters to use instead of training on all references
        #[arg(long, conflicts_with = "crossfit")]
        model: Option<PathBuf>,
        /// Cross-fit over reference folds instead of one model on all references
        #[arg(long)]
        crossfit: bool,
    },
    /// Run an experiment protocol and write JSON and markdown reports
    Run {
        /// Experiment config (same schema as --config)
        spec: Option<PathBuf>,
    },
    /// Compare relabel outcomes and original labels with the ground truth
    Audit {
        #[arg(long)]
        outcomes: PathBuf,
    },
    /// Render report JSON files as one markdown or JSON document
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        render: ReportFormat,
        /// Output file name inside the output directory [default: stdout]
        #[arg(long)]
        output: Option<String>,
    },
}

/// Runs one invocation. On failure every file it wrote is removed.
pub fn execute(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let config_path = match &cli.command {
        Command::Run { spec: Some(spec) } => {
            if cli.config.is_some() {
                return Err(CliError::usage("give the experiment config either positionally or with --config, not both"));
            }
            Some(spec.as_path())
        }
        _ => cli.config.as_deref(),
    };
    let config = PipelineConfig::resolve(config_path, &cli.overrides)?;
    let mut outputs = Outputs::new(config.out_dir())?;
    match dispatch(&cli.command, &config, &mut outputs) {
        Ok(()) => Ok(outputs.written().to_vec()),
        Err(e) => {
            outputs.discard();
            Err(e)
        }
    }
}

fn dispatch(command: &Command, config: &PipelineConfig, out: &mut Outputs) -> CliResult<()> {
    match command {
        Command::Generate => generate(config, out),
        Command::AssignLabels { data } => assign_labels(config, data.as_deref(), out),
        Command::TrainClassifier { data } => train_classifier(config, data.as_deref(), out),
        Command::TrainSiamese { data } => train_siamese(config, data.as_deref(), out),
        Command::Relabel { model, crossfit } => relabel_cmd(config, model.as_deref(), *crossfit, out),
        Command::Run { .. } => run(config, out),
        Command::Audit { outcomes } => audit(config, outcomes, out),
        Command::Report { inputs, render, output } => report_cmd(config, inputs, *render, output.as_deref(), out),
    }
}

fn say(line: impl AsRef<str>) {
    let _ = writeln!(std::io::stdout(), "{}", line.as_ref());
}

fn noisy(config: &PipelineConfig) -> CliResult<Vec<SampleRecord>> {
    io::load_dataset(config.require(&config.paths.noisy, "noisy")?)
}

fn reference(config: &PipelineConfig) -> CliResult<Vec<SampleRecord>> {
    io::load_dataset(config.require(&config.paths.reference, "reference")?)
}

fn average_scores(records: &[SampleRecord]) -> CliResult<BTreeMap<String, f64>> {
    records.iter().map(|r| Ok((r.id.clone(), dataset::average_score(r)?.value()))).collect()
}

fn counts_line(what: &str, c: &LabelCounts) -> String {
    format!("{what}: benign {}, malignant {}", c.benign, c.malignant)
}

fn generate(config: &PipelineConfig, out: &mut Outputs) -> CliResult<()> {
    let data = synth::generate(&config.generator())?;
    let format = config.data_format();
    let ext = format.extension();
    out.write(&format!("noisy.{ext}"), &io::encode_dataset(&data.noisy, format, config.seed)?)?;
    out.write(&format!("reference.{ext}"), &io::encode_dataset(&data.reference, format, config.seed)?)?;
    out.write("ground_truth.csv", &io::write_ground_truth(&data.ground_truth, config.seed)?)?;
    say(format!(
        "seed {}: {} noisy and {} reference samples written to {}",
        config.seed,
        data.noisy.len(),
        data.reference.len(),
        out.dir().display()
    ));
    Ok(())
}

fn assign_labels(config: &PipelineConfig, data: Option<&Path>, out: &mut Outputs) -> CliResult<()> {
    let records = match data {
        Some(p) => io::load_dataset(p)?,
        None => noisy(config)?,
    };
    let scenario = config.require_scenario()?;
    let assignment = dataset::assign_labels(&records, &scenario)?;
    out.write("labels.csv", &io::write_assigned_labels(&records, &assignment.labels, config.seed)?)?;
    say(format!("scenario {}: {} labeled, {} excluded", scenario.name(), assignment.labels.len(), assignment.excluded.len()));
    say(counts_line("labels", &dataset::label_distribution(assignment.labels.values())));
    Ok(())
}

fn write_model(out: &mut Outputs, name: &str, params: &NetParams, log: &net::TrainLog, seed: u64) -> CliResult<()> {
    out.write(&format!("{name}.json"), &io::write_params(params, seed)?)?;
    out.write(&format!("{name}_log.jsonl"), &io::write_train_log(&log.epochs, seed)?)?;
    for w in &log.warnings {
        say(format!("warning: {w}"));
    }
    if let (Some(best), Some(last)) = (log.best_epoch, log.epochs.last()) {
        say(format!("{name}: best epoch {best} of {}, final train loss {:.6}", log.epochs.len(), last.train_loss));
    }
    Ok(())
}

fn train_classifier(config: &PipelineConfig, data: Option<&Path>, out: &mut Outputs) -> CliResult<()> {
    let records = match data {
        Some(p) => io::load_dataset(p)?,
        None => reference(config)?,
    };
    let labels = match config.scenario()? {
        Some(s) => dataset::assign_labels(&records, &s)?.labels,
        None => dataset::verified_labels(&records).context("training without a scenario needs verified labels")?,
    };
    let examples: Vec<Example<'_>> = records
        .iter()
        .filter_map(|r| Some(Example { features: &r.features, label: *labels.get(&r.id)? }))
        .collect();
    let dim = examples.first().ok_or_else(|| CliError::data("no labeled samples to train on"))?.features.len();
    let setup = config.setup().reseeded(config.seed, 300);
    let (params, log) = net::train(&setup.train, &setup.net_for(dim, Head::SigmoidClassifier), &examples)?;
    write_model(out, "classifier", &params, &log, config.seed)
}

fn train_siamese(config: &PipelineConfig, data: Option<&Path>, out: &mut Outputs) -> CliResult<()> {
    let records = match data {
        Some(p) => io::load_dataset(p)?,
        None => reference(config)?,
    };
    let refs = relabel::references(&records)?;
    let dim = refs.first().ok_or_else(|| CliError::data("empty reference set"))?.features.len();
    let setup = config.setup().reseeded(config.seed, 200);
    let (params, log) = siamese::train_siamese(&setup.net_for(dim, Head::Embedding), &refs, &setup.train, &setup.contrastive)?;
    write_model(out, "siamese", &params, &log, config.seed)?;
    let pairs = siamese::sample_pairs(&refs, &setup.contrastive)?;
    out.write("pairs.csv", &io::write_pairs(&pairs, config.seed)?)?;
    Ok(())
}

fn report_outcomes(out: &mut Outputs, suffix: &str, outcomes: &[RelabelOutcome], averages: &BTreeMap<String, f64>, seed: u64) -> CliResult<()> {
    out.write(&format!("outcomes{suffix}.csv"), &io::write_outcomes(outcomes, averages, seed)?)?;
    let histogram = relabel::relabel_statistics(outcomes, averages)?;
    out.write(&format!("histogram{suffix}.json"), &io::write_histogram(&histogram, seed)?)?;
    let s = relabel::summarize(outcomes);
    say(format!(
        "seed {seed}: {} queries, {} labeled, {} discarded (data reduction), {} disagreements",
        s.queries, s.labeled, s.discarded, s.disagreements
    ));
    Ok(())
}

fn relabel_cmd(config: &PipelineConfig, model: Option<&Path>, crossfit: bool, out: &mut Outputs) -> CliResult<()> {
    let noisy = noisy(config)?;
    let reference = reference(config)?;
    let scenario = config.require_scenario()?;
    let cfg = &config.relabel;
    cfg.validate()?;
    let assignment = dataset::assign_labels(&noisy, &scenario)?;
    let queries = relabel::build_queries(&noisy, &assignment, cfg.include_uncertain);
    let refs = relabel::references(&reference)?;
    let setup = config.setup();
    let outcomes = if crossfit {
        relabel::crossfit_relabel(&refs, &queries, config.experiment.folds, cfg, &setup, config.seed)?
    } else {
        let relabeler = match model {
            Some(path) => {
                let params = io::load_params(path)?;
                match (params.config().head, cfg.strategy) {
                    (Head::SigmoidClassifier, Strategy::Annotator) => Relabeler::Annotator(params),
                    (Head::Embedding, Strategy::Comparator) => {
                        let index = siamese::ReferenceIndex::build(&params, &refs)?;
                        Relabeler::Comparator { params, index }
                    }
                    (head, strategy) => {
                        return Err(CliError::usage(format!(
                            "{}: a {head:?} network cannot serve the {strategy:?} strategy",
                            path.display()
                        )))
                    }
                }
            }
            None => Relabeler::fit(cfg.strategy, &setup.reseeded(config.seed, 200), &refs)?,
        };
        relabeler.relabel(&queries, cfg)?
    };
    report_outcomes(out, "", &outcomes, &average_scores(&noisy)?, config.seed)
}

fn run(config: &PipelineConfig, out: &mut Outputs) -> CliResult<()> {
    let spec = config.experiment_spec()?;
    let noisy = if spec.case == Case::Case2ReferenceCv && config.paths.noisy.is_none() { Vec::new() } else { noisy(config)? };
    let reference = reference(config)?;
    let run = experiment::run_experiment(&spec, Datasets { noisy: &noisy, reference: &reference })?;
    let reports = [run.report];
    out.write("report.json", report::render_json(&reports, config.seed)?.as_bytes())?;
    out.write("report.md", report::render_markdown(&reports, config.seed).as_bytes())?;
    if !run.outcomes.is_empty() {
        let averages = average_scores(&noisy)?;
        for (seed, outcomes) in &run.outcomes {
            report_outcomes(out, &format!("_seed{seed}"), outcomes, &averages, *seed)?;
        }
    }
    let micro = &reports[0].aggregate.micro;
    say(format!(
        "{}: accuracy {}, sensitivity {}, specificity {}",
        report::method_label(&reports[0]),
        fmt_opt(micro.accuracy),
        fmt_opt(micro.sensitivity),
        fmt_opt(micro.specificity)
    ));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| String::from("n/a"), |x| format!("{x:.4}"))
}

#[derive(Debug, Serialize)]
pub struct AuditReport {
    pub seed: u64,
    pub outcomes: usize,
    pub relabel_accuracy: Option<f64>,
    pub original_label_accuracy: Option<f64>,
    pub relabeled: LabelCounts,
    pub original: LabelCounts,
    pub discarded: usize,
}

fn audit(config: &PipelineConfig, outcomes_path: &Path, out: &mut Outputs) -> CliResult<()> {
    let rows = io::load_outcomes(outcomes_path)?;
    let truth = io::load_ground_truth(config.require(&config.paths.ground_truth, "ground-truth")?)?;
    if rows.is_empty() || !rows.iter().any(|r| truth.contains_key(&r.outcome.id)) {
        return Err(CliError::data("outcomes and ground truth share no ids"));
    }
    if let Some(r) = rows.iter().find(|r| !truth.contains_key(&r.outcome.id)) {
        return Err(CliError::data(format!("outcome id `{}` is missing from the ground truth", r.outcome.id)));
    }
    let new: BTreeMap<String, Label> = rows.iter().filter_map(|r| Some((r.outcome.id.clone(), r.outcome.new_label?))).collect();
    let original: BTreeMap<String, Label> =
        rows.iter().filter_map(|r| Some((r.outcome.id.clone(), r.outcome.original_label?))).collect();
    let accuracy = |m: &BTreeMap<String, Label>| (!m.is_empty()).then(|| synth::oracle_accuracy(m, &truth)).transpose();
    let report = AuditReport {
        seed: config.seed,
        outcomes: rows.len(),
        relabel_accuracy: accuracy(&new)?,
        original_label_accuracy: accuracy(&original)?,
        relabeled: dataset::label_distribution(new.values()),
        original: dataset::label_distribution(original.values()),
        discarded: rows.len() - new.len(),
    };
    out.write("audit.json", &io::to_json(&report)?)?;
    say(format!("relabel accuracy: {}", fmt_opt(report.relabel_accuracy)));
    say(format!("original-label accuracy: {}", fmt_opt(report.original_label_accuracy)));
    say(counts_line("relabeled", &report.relabeled));
    say(counts_line("original", &report.original));
    Ok(())
}

fn report_cmd(
    config: &PipelineConfig,
    inputs: &[PathBuf],
    render: ReportFormat,
    output: Option<&str>,
    out: &mut Outputs,
) -> CliResult<()> {
    let mut reports = Vec::new();
    for path in inputs {
        reports.extend(report::parse_reports(&io::read_text(path)?, &path.display().to_string())?);
    }
    let text = report::render_report(&reports, render, config.seed)?;
    match output {
        Some(name) => {
            out.write(name, text.as_bytes())?;
        }
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}
