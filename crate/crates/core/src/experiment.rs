//! Cross-validated study protocols.
//!
//! * `case1_scenario_train`: k-fold CV on scenario-labeled noisy data.
//! * `case2_reference_cv`: k-fold CV on the verified reference set.
//! * `case3_cross_test`: train on scenario-labeled noisy data, test on the
//!   whole reference set.
//! * `case3_fine_tune`: as above, then fine-tune on k-1 reference folds and
//!   test on the held fold.
//! * `relabel_retrain`: per reference fold, relabel the noisy data with a
//!   model that never saw the fold, train a classifier from scratch on the
//!   new labels and test it on the fold.
//!
//! Every fold checks that its training and test ids are disjoint.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Label, SampleRecord, Scenario};
use crate::error::{Error, Result};
use crate::metrics::{self, Aggregate, ConfusionMatrix, MetricsReport};
use crate::net::{self, Example, Head, NetParams};
use crate::relabel::{self, ModeSummary, ModelSetup, Query, RelabelConfig, RelabelOutcome};
use crate::rng;
use crate::siamese::Reference;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Case1ScenarioTrain,
    Case2ReferenceCv,
    Case3CrossTest,
    Case3FineTune,
    RelabelRetrain,
}

impl Case {
    pub fn needs_scenario(self) -> bool {
        !matches!(self, Case::Case2ReferenceCv)
    }
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub case: Case,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relabel: Option<RelabelConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub setup: ModelSetup,
}

impl ExperimentSpec {
    pub fn new(case: Case) -> Self {
        ExperimentSpec {
            case,
            scenario: None,
            relabel: None,
            seeds: default_seeds(),
            folds: default_folds(),
            setup: ModelSetup::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("an experiment needs at least one seed"));
        }
        if self.folds < 2 {
            return Err(Error::config("an experiment needs at least 2 folds"));
        }
        if self.case.needs_scenario() && self.scenario.is_none() {
            return Err(Error::config(alloc::format!("case {:?} requires a scenario", self.case)));
        }
        if self.case == Case::RelabelRetrain {
            self.relabel.as_ref().ok_or_else(|| Error::config("relabel_retrain requires a relabel config"))?.validate()?;
        }
        self.setup.train.validate()?;
        Ok(())
    }
}

/// The noisy (rater-scored) and reference (verified) datasets.
#[derive(Clone, Copy, Debug)]
pub struct Datasets<'a> {
    pub noisy: &'a [SampleRecord],
    pub reference: &'a [SampleRecord],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub seed: u64,
    pub fold: usize,
    pub cm: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub n_train: usize,
    pub n_test: usize,
}

/// Mode bookkeeping for one relabel_retrain seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelSummary {
    pub seed: u64,
    /// Counts over the cross-fitted outcomes (each query relabeled once).
    pub crossfit: ModeSummary,
    /// Counts for the full relabel performed by each fold model.
    pub per_fold: Vec<ModeSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub per_seed: Vec<FoldResult>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relabel: Vec<RelabelSummary>,
}

/// Report plus the cross-fitted relabel outcomes of each seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub outcomes: Vec<(u64, Vec<RelabelOutcome>)>,
}

struct Item<'a> {
    id: &'a str,
    features: &'a [f64],
    label: Label,
}

fn ensure_disjoint(fold: usize, train: &[Item<'_>], test: &[Item<'_>]) -> Result<()> {
    let train_ids: BTreeSet<&str> = train.iter().map(|i| i.id).collect();
    match test.iter().find(|t| train_ids.contains(t.id)) {
        Some(t) => Err(Error::FoldLeak { fold, id: String::from(t.id) }),
        None => Ok(()),
    }
}

fn examples<'a>(items: &[Item<'a>]) -> Vec<Example<'a>> {
    items.iter().map(|i| Example { features: i.features, label: i.label }).collect()
}

fn fit_classifier(setup: &ModelSetup, seed: u64, stream: u64, train: &[Item<'_>]) -> Result<NetParams> {
    let dim = train.first().ok_or(Error::Empty("training split"))?.features.len();
    let setup = setup.reseeded(seed, stream);
    let (params, _) = net::train(&setup.train, &setup.net_for(dim, Head::SigmoidClassifier), &examples(train))?;
    Ok(params)
}

fn evaluate(params: &NetParams, test: &[Item<'_>]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for item in test {
        cm.record(item.label, net::predict(params, item.features)?);
    }
    Ok(cm)
}

fn fold_result(seed: u64, fold: usize, cm: ConfusionMatrix, n_train: usize) -> Result<FoldResult> {
    Ok(FoldResult { seed, fold, cm, metrics: metrics::compute_metrics(&cm)?, n_train, n_test: cm.total() as usize })
}

fn items_from<'a>(records: &'a [SampleRecord], labels: &BTreeMap<String, Label>) -> Vec<Item<'a>> {
    records
        .iter()
        .filter_map(|r| Some(Item { id: &r.id, features: &r.features, label: *labels.get(&r.id)? }))
        .collect()
}

fn split<'a>(items: &[Item<'a>], assignment: &dataset::FoldSplit, fold: usize) -> (Vec<Item<'a>>, Vec<Item<'a>>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in items {
        let copy = Item { id: i.id, features: i.features, label: i.label };
        if assignment.fold_of(i.id) == Some(fold) {
            test.push(copy);
        } else {
            train.push(copy);
        }
    }
    (train, test)
}

/// Fold results of one seed, plus the relabel bookkeeping for relabel_retrain.
type SeedRun = (Vec<FoldResult>, Option<(RelabelSummary, Vec<RelabelOutcome>)>);

struct Runner<'a> {
    spec: &'a ExperimentSpec,
    data: Datasets<'a>,
    reference_labels: BTreeMap<String, Label>,
}

impl Runner<'_> {
    fn scenario_labels(&self) -> Result<dataset::LabelAssignment> {
        let scenario = self.spec.scenario.as_ref().ok_or_else(|| Error::config("missing scenario"))?;
        dataset::assign_labels(self.data.noisy, scenario)
    }

    fn folds(&self, labels: &BTreeMap<String, Label>, seed: u64) -> Result<dataset::FoldSplit> {
        dataset::stratified_kfold(labels, self.spec.folds, rng::derive_seed(seed, 100))
    }

    fn cross_validate(&self, seed: u64, labels: &BTreeMap<String, Label>, records: &[SampleRecord]) -> Result<Vec<FoldResult>> {
        let items = items_from(records, labels);
        let assignment = self.folds(labels, seed)?;
        (0..self.spec.folds)
            .map(|fold| {
                let (train, test) = split(&items, &assignment, fold);
                ensure_disjoint(fold, &train, &test)?;
                let params = fit_classifier(&self.spec.setup, seed, 300 + fold as u64, &train)?;
                fold_result(seed, fold, evaluate(&params, &test)?, train.len())
            })
            .collect()
    }

    fn run_seed(&self, seed: u64) -> Result<SeedRun> {
        let reference_items = items_from(self.data.reference, &self.reference_labels);
        match self.spec.case {
            Case::Case1ScenarioTrain => {
                let labels = self.scenario_labels()?.labels;
                Ok((self.cross_validate(seed, &labels, self.data.noisy)?, None))
            }
            Case::Case2ReferenceCv => Ok((self.cross_validate(seed, &self.reference_labels, self.data.reference)?, None)),
            Case::Case3CrossTest => {
                let labels = self.scenario_labels()?.labels;
                let train = items_from(self.data.noisy, &labels);
                ensure_disjoint(0, &train, &reference_items)?;
                let params = fit_classifier(&self.spec.setup, seed, 300, &train)?;
                Ok((alloc::vec![fold_result(seed, 0, evaluate(&params, &reference_items)?, train.len())?], None))
            }
            Case::Case3FineTune => {
                let labels = self.scenario_labels()?.labels;
                let pretrain = items_from(self.data.noisy, &labels);
                ensure_disjoint(0, &pretrain, &reference_items)?;
                let base = fit_classifier(&self.spec.setup, seed, 300, &pretrain)?;
                let assignment = self.folds(&self.reference_labels, seed)?;
                let results = (0..self.spec.folds)
                    .map(|fold| {
                        let (train, test) = split(&reference_items, &assignment, fold);
                        ensure_disjoint(fold, &train, &test)?;
                        let setup = self.spec.setup.reseeded(seed, 400 + fold as u64);
                        let (params, _) = net::fine_tune(&base, &setup.train, &examples(&train))?;
                        fold_result(seed, fold, evaluate(&params, &test)?, train.len())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((results, None))
            }
            Case::RelabelRetrain => {
                let (results, summary, outcomes) = self.relabel_retrain(seed, &reference_items)?;
                Ok((results, Some((summary, outcomes))))
            }
        }
    }

    fn relabel_retrain(
        &self,
        seed: u64,
        reference_items: &[Item<'_>],
    ) -> Result<(Vec<FoldResult>, RelabelSummary, Vec<RelabelOutcome>)> {
        let config = self.spec.relabel.as_ref().ok_or_else(|| Error::config("missing relabel config"))?;
        let assignment = self.scenario_labels()?;
        let queries: Vec<Query<'_>> = relabel::build_queries(self.data.noisy, &assignment, config.include_uncertain);
        let references: Vec<Reference<'_>> =
            reference_items.iter().map(|i| Reference { id: i.id, features: i.features, label: i.label }).collect();
        let (folds, models) = relabel::fit_fold_relabelers(&references, self.spec.folds, config.strategy, &self.spec.setup, seed)?;
        let partition = relabel::query_partition(queries.len(), self.spec.folds, seed);
        let mut crossfit: Vec<Option<RelabelOutcome>> = alloc::vec![None; queries.len()];
        let mut per_fold = Vec::with_capacity(self.spec.folds);
        let mut results = Vec::with_capacity(self.spec.folds);
        for (fold, model) in models.iter().enumerate() {
            let outcomes = model.relabel(&queries, config)?;
            per_fold.push(relabel::summarize(&outcomes));
            let new_labels = relabel::relabeled_map(&outcomes);
            let train = items_from(self.data.noisy, &new_labels);
            let (_, test) = split(reference_items, &folds, fold);
            ensure_disjoint(fold, &train, &test)?;
            let params = fit_classifier(&self.spec.setup, seed, 300 + fold as u64, &train)?;
            results.push(fold_result(seed, fold, evaluate(&params, &test)?, train.len())?);
            for ((slot, outcome), &part) in crossfit.iter_mut().zip(outcomes).zip(&partition) {
                if part == fold {
                    *slot = Some(outcome);
                }
            }
        }
        let crossfit: Vec<RelabelOutcome> = crossfit.into_iter().map(|o| o.expect("every query is in one part")).collect();
        let summary = RelabelSummary { seed, crossfit: relabel::summarize(&crossfit), per_fold };
        Ok((results, summary, crossfit))
    }
}

pub fn run_experiment(spec: &ExperimentSpec, data: Datasets<'_>) -> Result<ExperimentRun> {
    spec.validate()?;
    let dims = [dataset::validate_dataset(data.noisy)?, dataset::validate_dataset(data.reference)?];
    if let [Some(a), Some(b)] = dims {
        if a != b {
            return Err(Error::DimensionMismatch { expected: a, found: b });
        }
    }
    let runner = Runner { spec, data, reference_labels: dataset::verified_labels(data.reference)? };
    let mut per_seed = Vec::new();
    let mut relabel = Vec::new();
    let mut outcomes = Vec::new();
    for &seed in &spec.seeds {
        let (results, extra) = runner.run_seed(seed)?;
        per_seed.extend(results);
        if let Some((summary, o)) = extra {
            relabel.push(summary);
            outcomes.push((seed, o));
        }
    }
    let matrices: Vec<ConfusionMatrix> = per_seed.iter().map(|r| r.cm).collect();
    let aggregate = metrics::aggregate(&matrices)?;
    Ok(ExperimentRun { report: ExperimentReport { spec: spec.clone(), per_seed, aggregate, relabel }, outcomes })
}

/// Runs `base` once per scenario with the same seeds throughout.
pub fn scenario_sweep(data: Datasets<'_>, scenarios: &[Scenario], base: &ExperimentSpec) -> Result<Vec<ExperimentReport>> {
    if scenarios.is_empty() {
        return Err(Error::Empty("scenario list"));
    }
    scenarios
        .iter()
        .map(|scenario| {
            let spec = ExperimentSpec { scenario: Some(scenario.clone()), ..base.clone() };
            Ok(run_experiment(&spec, data)?.report)
        })
        .collect()
}
