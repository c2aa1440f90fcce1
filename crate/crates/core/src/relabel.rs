//! New labels for under-labeled samples, from a trained classifier (the
//! annotator strategy) or from similarity votes against the reference set
//! (the comparator strategy).
//!
//! Substitute mode accepts every new label. Consensus mode keeps a sample
//! only when the new label agrees with its original one and discards the
//! rest.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Label, LabelAssignment, SampleRecord};
use crate::error::{Error, Result};
use crate::net::{self, Example, Head, NetConfig, NetParams, TrainConfig};
use crate::rng;
use crate::siamese::{self, ContrastiveConfig, Reference, ReferenceIndex};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Annotator,
    #[default]
    Comparator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Substitute,
    Consensus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelabelConfig {
    pub strategy: Strategy,
    pub mode: Mode,
    pub top_fraction: f64,
    /// Also relabel samples the scenario excluded (no original label).
    pub include_uncertain: bool,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig { strategy: Strategy::Comparator, mode: Mode::Substitute, top_fraction: 0.2, include_uncertain: false }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::config("top_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A sample to relabel; `original_label` is absent for excluded samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query<'a> {
    pub id: &'a str,
    pub features: &'a [f64],
    pub original_label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelOutcome {
    pub id: String,
    /// Absent when consensus mode discarded the sample.
    pub new_label: Option<Label>,
    /// Mean label of the top-ranked references (comparator) or the
    /// classifier probability (annotator).
    pub vote_mean: f64,
    pub original_label: Option<Label>,
    pub agreed: Option<bool>,
}

/// Queries for every labeled record, plus the excluded ones when
/// `include_uncertain` is set. Input order is preserved.
pub fn build_queries<'a>(records: &'a [SampleRecord], assignment: &LabelAssignment, include_uncertain: bool) -> Vec<Query<'a>> {
    records
        .iter()
        .filter_map(|r| {
            let original_label = assignment.labels.get(&r.id).copied();
            (original_label.is_some() || include_uncertain).then_some(Query {
                id: &r.id,
                features: &r.features,
                original_label,
            })
        })
        .collect()
}

/// References for every record carrying a verified label.
pub fn references(records: &[SampleRecord]) -> Result<Vec<Reference<'_>>> {
    records
        .iter()
        .map(|r| {
            let label = r.verified_label.ok_or(Error::Empty("verified label"))?;
            Ok(Reference { id: &r.id, features: &r.features, label })
        })
        .collect()
}

fn resolve(query: &Query<'_>, prediction: Label, vote_mean: f64, config: &RelabelConfig) -> RelabelOutcome {
    let original = query.original_label;
    let (new_label, agreed) = match (config.mode, original) {
        (Mode::Substitute, _) => (Some(prediction), original.map(|o| o == prediction)),
        (Mode::Consensus, Some(o)) => {
            let agree = o == prediction;
            (agree.then_some(prediction), Some(agree))
        }
        (Mode::Consensus, None) if config.include_uncertain => (Some(prediction), None),
        (Mode::Consensus, None) => (None, None),
    };
    RelabelOutcome { id: String::from(query.id), new_label, vote_mean, original_label: original, agreed }
}

/// `ceil(fraction * n)`, at least one and at most `n`.
pub fn top_count(fraction: f64, n: usize) -> usize {
    // Absorb representation error such as 0.2 * 180 = 36.000000000000004.
    let raw = libm::ceil(fraction * n as f64 - 1e-9);
    (raw as usize).clamp(1, n.max(1))
}

/// Mean label of the `n` nearest references; an exact tie defers to the
/// nearest reference.
pub fn vote(ranked: &[siamese::Neighbor], n: usize) -> Result<(Label, f64)> {
    let top = ranked.get(..n).filter(|t| !t.is_empty()).ok_or(Error::Empty("reference ranking"))?;
    let malignant = top.iter().filter(|nb| nb.label == Label::Malignant).count();
    let mean = malignant as f64 / top.len() as f64;
    let label = if 2 * malignant > top.len() {
        Label::Malignant
    } else if 2 * malignant < top.len() {
        Label::Benign
    } else {
        top[0].label
    };
    Ok((label, mean))
}

pub fn relabel_comparator_indexed(
    params: &NetParams,
    index: &ReferenceIndex,
    queries: &[Query<'_>],
    config: &RelabelConfig,
) -> Result<Vec<RelabelOutcome>> {
    config.validate()?;
    if index.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let n = top_count(config.top_fraction, index.len());
    queries
        .iter()
        .map(|q| {
            let ranked = index.rank(&params.forward(q.features)?)?;
            let (label, mean) = vote(&ranked, n)?;
            Ok(resolve(q, label, mean, config))
        })
        .collect()
}

pub fn relabel_comparator(
    params: &NetParams,
    queries: &[Query<'_>],
    references: &[Reference<'_>],
    config: &RelabelConfig,
) -> Result<Vec<RelabelOutcome>> {
    let index = ReferenceIndex::build(params, references)?;
    relabel_comparator_indexed(params, &index, queries, config)
}

pub fn relabel_annotator(classifier: &NetParams, queries: &[Query<'_>], config: &RelabelConfig) -> Result<Vec<RelabelOutcome>> {
    config.validate()?;
    queries
        .iter()
        .map(|q| {
            let prob = classifier.probability(q.features)?;
            let label = if prob > 0.5 { Label::Malignant } else { Label::Benign };
            Ok(resolve(q, label, prob, config))
        })
        .collect()
}

/// Network, training and pair settings shared by every model of a run.
/// `net.input_dim` and `net.head` are filled in from the data and the
/// strategy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSetup {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
}

impl ModelSetup {
    /// Copy with every seed derived from `seed` and `stream`.
    pub fn reseeded(&self, seed: u64, stream: u64) -> Self {
        let base = rng::derive_seed(seed, stream);
        let mut setup = self.clone();
        setup.net.seed = rng::derive_seed(base, 1);
        setup.train.seed = rng::derive_seed(base, 2);
        setup.contrastive.seed = rng::derive_seed(base, 3);
        setup
    }

    pub fn net_for(&self, input_dim: usize, head: Head) -> NetConfig {
        NetConfig { input_dim, head, ..self.net.clone() }
    }
}

/// A trained relabeling model.
#[derive(Clone, Debug)]
pub enum Relabeler {
    Annotator(NetParams),
    Comparator { params: NetParams, index: ReferenceIndex },
}

impl Relabeler {
    /// Trains the model for `strategy` on the given references.
    pub fn fit(strategy: Strategy, setup: &ModelSetup, references: &[Reference<'_>]) -> Result<Self> {
        let dim = references.first().ok_or(Error::Empty("reference set"))?.features.len();
        match strategy {
            Strategy::Annotator => {
                let examples: Vec<Example<'_>> =
                    references.iter().map(|r| Example { features: r.features, label: r.label }).collect();
                let net = setup.net_for(dim, Head::SigmoidClassifier);
                let (params, _) = net::train(&setup.train, &net, &examples)?;
                Ok(Relabeler::Annotator(params))
            }
            Strategy::Comparator => {
                let net = setup.net_for(dim, Head::Embedding);
                let (params, _) = siamese::train_siamese(&net, references, &setup.train, &setup.contrastive)?;
                let index = ReferenceIndex::build(&params, references)?;
                Ok(Relabeler::Comparator { params, index })
            }
        }
    }

    pub fn params(&self) -> &NetParams {
        match self {
            Relabeler::Annotator(p) | Relabeler::Comparator { params: p, .. } => p,
        }
    }

    pub fn relabel(&self, queries: &[Query<'_>], config: &RelabelConfig) -> Result<Vec<RelabelOutcome>> {
        match self {
            Relabeler::Annotator(p) => relabel_annotator(p, queries, config),
            Relabeler::Comparator { params, index } => relabel_comparator_indexed(params, index, queries, config),
        }
    }
}

/// Per-fold relabelers: model `f` is trained on every reference outside
/// fold `f`.
pub fn fit_fold_relabelers(
    references: &[Reference<'_>],
    k: usize,
    strategy: Strategy,
    setup: &ModelSetup,
    seed: u64,
) -> Result<(dataset::FoldSplit, Vec<Relabeler>)> {
    let labels: BTreeMap<String, Label> = references.iter().map(|r| (String::from(r.id), r.label)).collect();
    if labels.len() != references.len() {
        return Err(Error::config("reference ids must be unique"));
    }
    let split = dataset::stratified_kfold(&labels, k, rng::derive_seed(seed, 100))?;
    let models = (0..k)
        .map(|fold| {
            let train: Vec<Reference<'_>> =
                references.iter().filter(|r| split.fold_of(r.id) != Some(fold)).copied().collect();
            Relabeler::fit(strategy, &setup.reseeded(seed, 200 + fold as u64), &train)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((split, models))
}

/// Seeded round-robin partition of `n` queries into `k` parts.
pub fn query_partition(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, 101)));
    let mut part = alloc::vec![0; n];
    for (slot, &q) in order.iter().enumerate() {
        part[q] = slot % k;
    }
    part
}

/// Cross-fitted relabeling: queries are dealt into `k` parts and part `f`
/// is relabeled by the model that never saw reference fold `f`. Outcomes
/// come back in query order, one per query.
pub fn crossfit_relabel(
    references: &[Reference<'_>],
    queries: &[Query<'_>],
    k: usize,
    config: &RelabelConfig,
    setup: &ModelSetup,
    seed: u64,
) -> Result<Vec<RelabelOutcome>> {
    config.validate()?;
    let (_, models) = fit_fold_relabelers(references, k, config.strategy, setup, seed)?;
    crossfit_with(&models, queries, config, seed)
}

/// Relabels each query partition with its fold model.
pub fn crossfit_with(models: &[Relabeler], queries: &[Query<'_>], config: &RelabelConfig, seed: u64) -> Result<Vec<RelabelOutcome>> {
    let part = query_partition(queries.len(), models.len(), seed);
    let mut outcomes: Vec<Option<RelabelOutcome>> = alloc::vec![None; queries.len()];
    for (fold, model) in models.iter().enumerate() {
        let idx: Vec<usize> = (0..queries.len()).filter(|&i| part[i] == fold).collect();
        let subset: Vec<Query<'_>> = idx.iter().map(|&i| queries[i]).collect();
        for (i, outcome) in idx.into_iter().zip(model.relabel(&subset, config)?) {
            outcomes[i] = Some(outcome);
        }
    }
    Ok(outcomes.into_iter().map(|o| o.expect("every query belongs to one part")).collect())
}

/// Counts behind the mode contracts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub queries: usize,
    pub labeled: usize,
    pub discarded: usize,
    pub disagreements: usize,
}

pub fn summarize(outcomes: &[RelabelOutcome]) -> ModeSummary {
    let labeled = outcomes.iter().filter(|o| o.new_label.is_some()).count();
    ModeSummary {
        queries: outcomes.len(),
        labeled,
        discarded: outcomes.len() - labeled,
        disagreements: outcomes.iter().filter(|o| o.agreed == Some(false)).count(),
    }
}

/// Retained labels as an id map.
pub fn relabeled_map(outcomes: &[RelabelOutcome]) -> BTreeMap<String, Label> {
    outcomes.iter().filter_map(|o| Some((o.id.clone(), o.new_label?))).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub benign: usize,
    pub malignant: usize,
    pub discarded: usize,
}

impl BinCounts {
    pub fn total(&self) -> usize {
        self.benign + self.malignant + self.discarded
    }
}

/// Outcome counts per nearest-integer average score, bins 1 to 5.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelabelHistogram {
    pub bins: BTreeMap<u8, BinCounts>,
}

impl RelabelHistogram {
    pub fn bin(&self, score: u8) -> BinCounts {
        self.bins.get(&score).copied().unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.bins.values().map(BinCounts::total).sum()
    }
}

pub fn relabel_statistics(outcomes: &[RelabelOutcome], average_scores: &BTreeMap<String, f64>) -> Result<RelabelHistogram> {
    let mut bins: BTreeMap<u8, BinCounts> = (dataset::MIN_SCORE..=dataset::MAX_SCORE).map(|s| (s, BinCounts::default())).collect();
    for outcome in outcomes {
        let avg = *average_scores.get(&outcome.id).ok_or_else(|| Error::UnknownId(outcome.id.clone()))?;
        let bin = libm::round(avg).clamp(f64::from(dataset::MIN_SCORE), f64::from(dataset::MAX_SCORE)) as u8;
        let counts = bins.get_mut(&bin).expect("all bins present");
        match outcome.new_label {
            Some(Label::Benign) => counts.benign += 1,
            Some(Label::Malignant) => counts.malignant += 1,
            None => counts.discarded += 1,
        }
    }
    Ok(RelabelHistogram { bins })
}
