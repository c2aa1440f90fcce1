//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured value next to its pinned threshold.
//!
//! The statistical criteria share their expensive runs through `OnceLock`
//! caches, so each pipeline configuration is trained once per seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relabel_core::dataset::{self, default_scenario, default_scenarios};
use relabel_core::experiment::{self, Case, Datasets, ExperimentSpec};
use relabel_core::metrics::{self, ConfusionMatrix};
use relabel_core::net::{self, Activation, Example, Head, NetConfig, NetParams, Objective, TrainConfig};
use relabel_core::relabel::{self, Mode, ModelSetup, RelabelConfig, Relabeler, Strategy};
use relabel_core::siamese::{self, Contrastive, FeaturePair};
use relabel_core::synth::{self, GeneratorConfig, SyntheticData};
use relabel_core::Label;

const SEEDS: u64 = 10;

// Criterion 1
const TABLE_TOLERANCE: f64 = 5e-5;
// Criterion 2
const GRAD_CONFIGS: usize = 24;
const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor so components that are zero up to rounding compare by
/// absolute error.
const GRAD_REL_FLOOR: f64 = 1e-6;
// Criterion 3
const SEPARATION_MIN_SEEDS: usize = 9;
// Criterion 4
const BIAS_MIN_GAP: f64 = 0.15;
// Criterion 5
const MAX_FP_INVERSIONS: usize = 1;
// Criterion 6
const RELABEL_MIN_GAIN: f64 = 0.05;
const RETRAIN_MIN_GAIN: f64 = 0.03;
// Criterion 7
const UNCERTAIN_SLACK: f64 = 0.01;
// Criterion 9
const ONE_NN_QUERIES: usize = 100;

fn verdict(id: u8, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let line = format!("acceptance criterion {id:>2} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    // Written to the raw handle so the line survives test output capture.
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn data(seed: u64) -> SyntheticData {
    synth::generate(&GeneratorConfig { seed, ..GeneratorConfig::default() }).unwrap()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_01_table_metrics() {
    let m = metrics::compute_metrics(&ConfusionMatrix::new(60, 36, 54, 30)).unwrap();
    let expected = [0.6667, 0.6000, 0.6250, 0.6429, 0.6333, 0.6452];
    let worst = m.values().iter().zip(expected).map(|(v, e)| (v.unwrap() - e).abs()).fold(0.0, f64::max);
    verdict(1, "metric arithmetic", worst <= TABLE_TOLERANCE, format!("max deviation {worst:.2e} <= {TABLE_TOLERANCE:.0e}"));
}

fn numeric_grad<T, O: Objective<T>>(params: &NetParams, batch: &[T], objective: &O) -> Vec<f64> {
    let base = params.flat();
    let loss_at = |vals: &[f64]| {
        let mut p = params.clone();
        p.set_flat(vals).unwrap();
        batch.iter().map(|item| objective.loss(&p, item).unwrap()).sum::<f64>()
    };
    (0..base.len())
        .map(|i| {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_REL_FLOOR))
        .fold(0.0, f64::max)
}

fn random_params(rng: &mut ChaCha8Rng, head: Head) -> NetParams {
    let input_dim = rng.random_range(1..=5);
    let hidden_dims = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..=6)).collect();
    let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    let config = NetConfig { input_dim, hidden_dims, embed_dim: rng.random_range(1..=4), activation, head, seed: rng.random() };
    let mut params = NetParams::init(&config).unwrap();
    // Random biases keep ReLU pre-activations away from the kink at 0.
    let shifted: Vec<f64> = params.flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    params.set_flat(&shifted).unwrap();
    params
}

#[test]
fn criterion_02_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..GRAD_CONFIGS {
        let head = if i % 2 == 0 { Head::SigmoidClassifier } else { Head::Embedding };
        let params = random_params(&mut rng, head);
        let dim = params.input_dim();
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let err = match head {
            Head::SigmoidClassifier => {
                let batch: Vec<Example<'_>> = xs
                    .iter()
                    .map(|x| Example { features: x, label: if rng.random_bool(0.5) { Label::Malignant } else { Label::Benign } })
                    .collect();
                let (_, g) = net::bce_backprop(&params, &batch).unwrap();
                max_rel_error(&g.flat(), &numeric_grad(&params, &batch, &net::Bce))
            }
            Head::Embedding => {
                let margin = rng.random_range(0.5..3.0);
                let batch: Vec<FeaturePair<'_>> =
                    xs.chunks(2).map(|p| FeaturePair { a: &p[0], b: &p[1], same_class: rng.random_bool(0.5) }).collect();
                let (_, g) = siamese::contrastive_backprop(&params, &batch, margin).unwrap();
                max_rel_error(&g.flat(), &numeric_grad(&params, &batch, &Contrastive { margin }))
            }
        };
        worst = worst.max(err);
    }
    verdict(
        2,
        "gradient correctness",
        worst < GRAD_REL_TOL,
        format!("{GRAD_CONFIGS} configurations, max relative error {worst:.2e} < {GRAD_REL_TOL:.0e}"),
    );
}

#[test]
fn criterion_03_siamese_separation() {
    let mut separated = 0;
    let mut detail = Vec::new();
    for seed in 0..SEEDS {
        let d = data(seed);
        let refs = relabel::references(&d.reference).unwrap();
        let setup = ModelSetup::default().reseeded(seed, 200);
        let net = setup.net_for(refs[0].features.len(), Head::Embedding);
        let (params, _) = siamese::train_siamese(&net, &refs, &setup.train, &setup.contrastive).unwrap();
        let emb: Vec<Vec<f64>> = refs.iter().map(|r| params.forward(r.features).unwrap()).collect();
        let (mut within, mut cross) = (Vec::new(), Vec::new());
        for i in 0..refs.len() {
            for j in i + 1..refs.len() {
                let dist = siamese::euclidean_distance(&emb[i], &emb[j]).unwrap();
                if refs[i].label == refs[j].label { within.push(dist) } else { cross.push(dist) }
            }
        }
        let (w, c) = (mean(within), mean(cross));
        separated += usize::from(w < c);
        detail.push(format!("{w:.3}/{c:.3}"));
    }
    verdict(
        3,
        "metric-learning separation",
        separated >= SEPARATION_MIN_SEEDS,
        format!("within < cross in {separated}/{SEEDS} seeds, need >= {SEPARATION_MIN_SEEDS}; within/cross {}", detail.join(" ")),
    );
}

/// Scenario sweep A→F of `case3_cross_test`, one data set per seed.
struct SweepSeed {
    sensitivity_a: f64,
    specificity_a: f64,
    accuracy_a: f64,
    fp: Vec<u64>,
}

fn sweep() -> &'static [SweepSeed] {
    static CACHE: OnceLock<Vec<SweepSeed>> = OnceLock::new();
    CACHE.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                let d = data(seed);
                let base = ExperimentSpec { seeds: vec![seed], ..ExperimentSpec::new(Case::Case3CrossTest) };
                let reports =
                    experiment::scenario_sweep(Datasets { noisy: &d.noisy, reference: &d.reference }, &default_scenarios(), &base)
                        .unwrap();
                let a = reports[0].aggregate.micro;
                SweepSeed {
                    sensitivity_a: a.sensitivity.unwrap(),
                    specificity_a: a.specificity.unwrap(),
                    accuracy_a: a.accuracy.unwrap(),
                    fp: reports.iter().map(|r| r.aggregate.pooled.fp).collect(),
                }
            })
            .collect()
    })
}

#[test]
fn criterion_04_bias_detection() {
    let runs = sweep();
    let gap = mean(runs.iter().map(|r| r.sensitivity_a - r.specificity_a));
    let spec = mean(runs.iter().map(|r| r.specificity_a));
    verdict(
        4,
        "bias detection",
        gap >= BIAS_MIN_GAP,
        format!("mean sensitivity - specificity {gap:.4} >= {BIAS_MIN_GAP}; mean specificity {spec:.4}"),
    );
}

#[test]
fn criterion_05_threshold_trend() {
    let runs = sweep();
    let fp: Vec<f64> = (0..6).map(|s| mean(runs.iter().map(|r| r.fp[s] as f64))).collect();
    let inversions = fp.windows(2).filter(|w| w[1] > w[0]).count();
    let shown: Vec<String> = fp.iter().map(|v| format!("{v:.1}")).collect();
    verdict(
        5,
        "threshold trend",
        inversions <= MAX_FP_INVERSIONS,
        format!("mean FP A..F [{}], {inversions} inversion(s) <= {MAX_FP_INVERSIONS}", shown.join(", ")),
    );
}

/// Cross-fitted comparator/substitute relabel-then-retrain runs.
struct RelabelSeed {
    original_accuracy: f64,
    relabel_accuracy: f64,
    retrain_accuracy: f64,
    retrain_uncertain_accuracy: f64,
}

fn relabel_spec(seed: u64, include_uncertain: bool) -> ExperimentSpec {
    ExperimentSpec {
        scenario: default_scenario("A"),
        relabel: Some(RelabelConfig { include_uncertain, ..RelabelConfig::default() }),
        seeds: vec![seed],
        ..ExperimentSpec::new(Case::RelabelRetrain)
    }
}

fn check_mode_contract(summary: &relabel::ModeSummary, outcomes: &[relabel_core::RelabelOutcome], mode: Mode) -> Result<(), String> {
    let recount = relabel::summarize(outcomes);
    if recount != *summary {
        return Err(format!("logged summary {summary:?} differs from outcomes {recount:?}"));
    }
    match mode {
        Mode::Substitute => {
            if summary.labeled != summary.queries || outcomes.iter().any(|o| o.new_label.is_none()) {
                return Err(format!("substitute emitted {} labels for {} queries", summary.labeled, summary.queries));
            }
        }
        Mode::Consensus => {
            for o in outcomes {
                match (o.original_label, o.new_label, o.agreed) {
                    (Some(orig), Some(new), Some(true)) if orig == new => {}
                    (Some(_), None, Some(false)) => {}
                    (None, Some(_), None) | (None, None, None) => {}
                    other => return Err(format!("{}: consensus outcome {other:?} breaks the contract", o.id)),
                }
            }
            if summary.discarded != summary.disagreements + outcomes.iter().filter(|o| o.original_label.is_none() && o.new_label.is_none()).count() {
                return Err(format!("discarded {} != disagreements {}", summary.discarded, summary.disagreements));
            }
        }
    }
    Ok(())
}

fn relabel_runs() -> &'static [RelabelSeed] {
    static CACHE: OnceLock<Vec<RelabelSeed>> = OnceLock::new();
    CACHE.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                let d = data(seed);
                let ds = Datasets { noisy: &d.noisy, reference: &d.reference };
                let exclude = experiment::run_experiment(&relabel_spec(seed, false), ds).unwrap();
                let include = experiment::run_experiment(&relabel_spec(seed, true), ds).unwrap();
                for run in [&exclude, &include] {
                    let summary = &run.report.relabel[0];
                    check_mode_contract(&summary.crossfit, &run.outcomes[0].1, Mode::Substitute).unwrap();
                }
                let original = dataset::assign_labels(&d.noisy, &default_scenario("A").unwrap()).unwrap().labels;
                let relabeled = relabel::relabeled_map(&exclude.outcomes[0].1);
                assert_eq!(relabeled.keys().collect::<Vec<_>>(), original.keys().collect::<Vec<_>>());
                RelabelSeed {
                    original_accuracy: synth::oracle_accuracy(&original, &d.ground_truth).unwrap(),
                    relabel_accuracy: synth::oracle_accuracy(&relabeled, &d.ground_truth).unwrap(),
                    retrain_accuracy: exclude.report.aggregate.micro.accuracy.unwrap(),
                    retrain_uncertain_accuracy: include.report.aggregate.micro.accuracy.unwrap(),
                }
            })
            .collect()
    })
}

#[test]
fn criterion_06_relabeling_wins() {
    let runs = relabel_runs();
    let original = mean(runs.iter().map(|r| r.original_accuracy));
    let relabeled = mean(runs.iter().map(|r| r.relabel_accuracy));
    let retrain = mean(runs.iter().map(|r| r.retrain_accuracy));
    let scenario_a = mean(sweep().iter().map(|r| r.accuracy_a));
    let pass = relabeled - original >= RELABEL_MIN_GAIN && retrain - scenario_a >= RETRAIN_MIN_GAIN;
    verdict(
        6,
        "re-labeling wins",
        pass,
        format!(
            "label accuracy {relabeled:.4} vs {original:.4} (gain {:.4} >= {RELABEL_MIN_GAIN}); reference accuracy {retrain:.4} vs {scenario_a:.4} (gain {:.4} >= {RETRAIN_MIN_GAIN})",
            relabeled - original,
            retrain - scenario_a
        ),
    );
}

#[test]
fn criterion_07_uncertain_inclusion() {
    let runs = relabel_runs();
    let include = mean(runs.iter().map(|r| r.retrain_uncertain_accuracy));
    let exclude = mean(runs.iter().map(|r| r.retrain_accuracy));
    verdict(
        7,
        "uncertain inclusion",
        include >= exclude - UNCERTAIN_SLACK,
        format!("include {include:.4} >= exclude {exclude:.4} - {UNCERTAIN_SLACK}"),
    );
}

fn quick_setup() -> ModelSetup {
    ModelSetup { train: TrainConfig { epochs: 10, ..TrainConfig::default() }, ..ModelSetup::default() }
}

#[test]
fn criterion_08_mode_contracts() {
    let d = synth::generate(&GeneratorConfig { n_noisy: 300, n_reference: 60, feature_dim: 8, seed: 8, ..GeneratorConfig::default() })
        .unwrap();
    let ds = Datasets { noisy: &d.noisy, reference: &d.reference };
    let mut checked = 0;
    let mut reductions = Vec::new();
    for strategy in [Strategy::Annotator, Strategy::Comparator] {
        for mode in [Mode::Substitute, Mode::Consensus] {
            for include_uncertain in [false, true] {
                let spec = ExperimentSpec {
                    scenario: default_scenario("A"),
                    relabel: Some(RelabelConfig { strategy, mode, include_uncertain, ..RelabelConfig::default() }),
                    seeds: vec![1, 2],
                    setup: quick_setup(),
                    ..ExperimentSpec::new(Case::RelabelRetrain)
                };
                let run = experiment::run_experiment(&spec, ds).unwrap();
                let assignment = dataset::assign_labels(&d.noisy, spec.scenario.as_ref().unwrap()).unwrap();
                let expected_queries = relabel::build_queries(&d.noisy, &assignment, include_uncertain).len();
                for (summary, (_, outcomes)) in run.report.relabel.iter().zip(&run.outcomes) {
                    assert_eq!(summary.crossfit.queries, expected_queries);
                    check_mode_contract(&summary.crossfit, outcomes, mode).unwrap_or_else(|e| panic!("{strategy:?}/{mode:?}: {e}"));
                    if mode == Mode::Consensus && !include_uncertain {
                        let retained = relabel::relabeled_map(outcomes);
                        assert!(retained.iter().all(|(id, l)| assignment.labels.get(id) == Some(l)));
                        reductions.push(summary.crossfit.discarded);
                    }
                    checked += 1;
                }
            }
        }
    }
    verdict(
        8,
        "mode contracts",
        true,
        format!("{checked} relabel runs checked; consensus data reduction counts {reductions:?}"),
    );
}

#[test]
fn criterion_09_one_nn_oracle() {
    let d = data(9);
    let refs = relabel::references(&d.reference).unwrap();
    let mut setup = ModelSetup::default().reseeded(9, 200);
    setup.train.epochs = 20;
    let (params, _) =
        siamese::train_siamese(&setup.net_for(refs[0].features.len(), Head::Embedding), &refs, &setup.train, &setup.contrastive)
            .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let queries: Vec<relabel::Query<'_>> = (0..ONE_NN_QUERIES)
        .map(|_| {
            let r = &d.noisy[rng.random_range(0..d.noisy.len())];
            relabel::Query { id: &r.id, features: &r.features, original_label: None }
        })
        .collect();
    let config = RelabelConfig { top_fraction: 1.0 / refs.len() as f64, ..RelabelConfig::default() };
    assert_eq!(relabel::top_count(config.top_fraction, refs.len()), 1);
    let outcomes = Relabeler::Comparator { index: siamese::ReferenceIndex::build(&params, &refs).unwrap(), params: params.clone() }
        .relabel(&queries, &config)
        .unwrap();

    let ref_emb: Vec<Vec<f64>> = refs.iter().map(|r| params.forward(r.features).unwrap()).collect();
    let mut matches = 0;
    for (q, o) in queries.iter().zip(&outcomes) {
        let e = params.forward(q.features).unwrap();
        let mut best: Option<(f64, &str, Label)> = None;
        for (r, re) in refs.iter().zip(&ref_emb) {
            let dist = e.iter().zip(re).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let better = match best {
                None => true,
                Some((bd, bid, _)) => dist < bd || (dist == bd && r.id < bid),
            };
            if better {
                best = Some((dist, r.id, r.label));
            }
        }
        let label = best.unwrap().2;
        matches += usize::from(o.new_label == Some(label) && o.vote_mean == label.as_f64());
    }
    verdict(
        9,
        "1-NN oracle equivalence",
        matches == ONE_NN_QUERIES,
        format!("{matches}/{ONE_NN_QUERIES} queries match brute-force 1-NN"),
    );
}

fn relabel_bin(args: &[&str], out: &Path) {
    let output = Command::new(env!("CARGO_BIN_EXE_relabel")).args(args).arg("--out-dir").arg(out).output().unwrap();
    assert!(output.status.success(), "relabel {args:?} failed: {}", String::from_utf8_lossy(&output.stderr));
}

/// Runs every command of the pipeline into `root`.
fn pipeline(root: &Path) -> Vec<PathBuf> {
    let data = root.join("data");
    let p = |name: &str| data.join(name).to_string_lossy().into_owned();
    let small = ["--n-noisy", "160", "--n-reference", "40", "--feature-dim", "4", "--epochs", "3", "--n-seeds", "2"];
    let with = |extra: &[&str]| -> Vec<String> { small.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str], out: &str| {
        let args = with(extra);
        relabel_bin(&args.iter().map(String::as_str).collect::<Vec<_>>(), &root.join(out));
    };
    run(&["--seed", "5", "generate"], "data");
    run(&["--seed", "5", "--format", "json", "generate"], "data_json");
    let (noisy, reference, truth) = (p("noisy.csv"), p("reference.csv"), p("ground_truth.csv"));
    run(&["assign-labels", "--noisy", &noisy, "--scenario", "A"], "labels");
    run(&["train-classifier", "--data", &noisy, "--scenario", "E"], "classifier");
    run(&["train-siamese", "--reference", &reference], "siamese");
    let io = ["--noisy", noisy.as_str(), "--reference", reference.as_str(), "--scenario", "A"];
    run(&[&io[..], &["relabel"]].concat(), "relabel");
    run(&[&io[..], &["--mode", "consensus", "--strategy", "annotator", "relabel", "--crossfit"]].concat(), "relabel_crossfit");
    let model = root.join("siamese/siamese.json").to_string_lossy().into_owned();
    run(&[&io[..], &["relabel", "--model", &model]].concat(), "relabel_model");
    run(&[&io[..], &["--case", "relabel_retrain", "--include-uncertain", "true", "run"]].concat(), "run_relabel");
    run(&[&io[..], &["--case", "case3_fine_tune", "run"]].concat(), "run_fine_tune");
    let outcomes = root.join("relabel/outcomes.csv").to_string_lossy().into_owned();
    run(&["audit", "--outcomes", &outcomes, "--ground-truth", &truth], "audit");
    let report = root.join("run_relabel/report.json").to_string_lossy().into_owned();
    let report2 = root.join("run_fine_tune/report.json").to_string_lossy().into_owned();
    run(&["report", &report, &report2, "--output", "combined.md"], "report");
    run(&["report", &report, &report2, "--render", "json", "--output", "combined.json"], "report");

    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() { stack.push(path) } else { files.push(path.strip_prefix(root).unwrap().to_path_buf()) }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_10_cli_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files_a = pipeline(a.path());
    let files_b = pipeline(b.path());
    assert_eq!(files_a, files_b);
    let differing: Vec<&PathBuf> =
        files_a.iter().filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap()).collect();
    let commands: BTreeMap<String, usize> = files_a.iter().fold(BTreeMap::new(), |mut m, f| {
        *m.entry(f.iter().next().unwrap().to_string_lossy().into_owned()).or_default() += 1;
        m
    });
    verdict(
        10,
        "determinism",
        differing.is_empty() && files_a.len() >= 20,
        format!("{} output files from {} output directories, {} differ between reruns", files_a.len(), commands.len(), differing.len()),
    );
}
