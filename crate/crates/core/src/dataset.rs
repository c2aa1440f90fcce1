//! Sample records, rater-score averaging, scenario label assignment and
//! stratified fold splitting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

/// Binary class. Malignant is the positive class throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn from_int(value: i64) -> Result<Self> {
        match value {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::InvalidLabel(other)),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Benign => Label::Malignant,
            Label::Malignant => Label::Benign,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Label::from_int(i64::from(value))
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_u8()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// One instance: a feature vector, its rater scores and, for reference
/// data, a verified label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub rater_scores: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified_label: Option<Label>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        rater_scores: Vec<u8>,
        verified_label: Option<Label>,
    ) -> Result<Self> {
        let record = SampleRecord { id: id.into(), features, rater_scores, verified_label };
        record.validate()?;
        Ok(record)
    }

    /// Checks the per-record invariants (score range, non-empty scores,
    /// finite features).
    pub fn validate(&self) -> Result<()> {
        if self.rater_scores.is_empty() {
            return Err(Error::EmptyScores { id: self.id.clone() });
        }
        if let Some(&score) = self.rater_scores.iter().find(|s| !(MIN_SCORE..=MAX_SCORE).contains(*s)) {
            return Err(Error::ScoreOutOfRange { id: self.id.clone(), score: i64::from(score) });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample features"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Validates a whole dataset: per-record invariants, one shared feature
/// dimension and unique ids. Returns the feature dimension (`None` for an
/// empty dataset).
pub fn validate_dataset(records: &[SampleRecord]) -> Result<Option<usize>> {
    let mut seen = BTreeSet::new();
    let dim = records.first().map(SampleRecord::dim);
    for record in records {
        record.validate()?;
        if let Some(expected) = dim {
            if record.dim() != expected {
                return Err(Error::DimensionMismatch { expected, found: record.dim() });
            }
        }
        if !seen.insert(record.id.as_str()) {
            return Err(Error::DuplicateId(record.id.clone()));
        }
    }
    Ok(dim)
}

/// Mean rater score, always within `[1, 5]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AverageScore(f64);

impl AverageScore {
    pub fn value(self) -> f64 {
        self.0
    }

    /// Nearest integer score bin, halves rounded up.
    pub fn bin(self) -> u8 {
        libm::round(self.0).clamp(f64::from(MIN_SCORE), f64::from(MAX_SCORE)) as u8
    }
}

pub fn average_score(record: &SampleRecord) -> Result<AverageScore> {
    if record.rater_scores.is_empty() {
        return Err(Error::EmptyScores { id: record.id.clone() });
    }
    let mut sum = 0u32;
    for &score in &record.rater_scores {
        if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
            return Err(Error::ScoreOutOfRange { id: record.id.clone(), score: i64::from(score) });
        }
        sum += u32::from(score);
    }
    // Integer sum first: the mean does not depend on score order.
    Ok(AverageScore(f64::from(sum) / record.rater_scores.len() as f64))
}

/// Interval over the average-score axis with independently open or closed
/// endpoints. Serialized as `[lo, hi, lo_closed, hi_closed]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, bool, bool)", into = "(f64, f64, bool, bool)")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Self {
        Interval { lo, hi, lo_closed, hi_closed }
    }

    pub const fn closed(lo: f64, hi: f64) -> Self {
        Interval::new(lo, hi, true, true)
    }

    /// `[lo, hi)`
    pub const fn closed_open(lo: f64, hi: f64) -> Self {
        Interval::new(lo, hi, true, false)
    }

    /// `(lo, hi]`
    pub const fn open_closed(lo: f64, hi: f64) -> Self {
        Interval::new(lo, hi, false, true)
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_closed { v >= self.lo } else { v > self.lo };
        let below = if self.hi_closed { v <= self.hi } else { v < self.hi };
        above && below
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi || (self.lo == self.hi && !(self.lo_closed && self.hi_closed))
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        if self.is_empty() || other.is_empty() {
            return false;
        }
        let (lo, lo_closed) = match self.lo.partial_cmp(&other.lo) {
            Some(core::cmp::Ordering::Greater) => (self.lo, self.lo_closed),
            Some(core::cmp::Ordering::Less) => (other.lo, other.lo_closed),
            _ => (self.lo, self.lo_closed && other.lo_closed),
        };
        let (hi, hi_closed) = match self.hi.partial_cmp(&other.hi) {
            Some(core::cmp::Ordering::Less) => (self.hi, self.hi_closed),
            Some(core::cmp::Ordering::Greater) => (other.hi, other.hi_closed),
            _ => (self.hi, self.hi_closed && other.hi_closed),
        };
        !Interval::new(lo, hi, lo_closed, hi_closed).is_empty()
    }
}

impl From<(f64, f64, bool, bool)> for Interval {
    fn from((lo, hi, lo_closed, hi_closed): (f64, f64, bool, bool)) -> Self {
        Interval { lo, hi, lo_closed, hi_closed }
    }
}

impl From<Interval> for (f64, f64, bool, bool) {
    fn from(i: Interval) -> Self {
        (i.lo, i.hi, i.lo_closed, i.hi_closed)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let open = if self.lo_closed { '[' } else { '(' };
        let close = if self.hi_closed { ']' } else { ')' };
        write!(f, "{open}{}, {}{close}", self.lo, self.hi)
    }
}

/// Benign and malignant ranges of one scenario, the value type of a
/// scenario table (`name -> {benign, malignant}`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRanges {
    pub benign: Interval,
    pub malignant: Interval,
}

/// Rule mapping an average score to benign, malignant or excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioRepr", into = "ScenarioRepr")]
pub struct Scenario {
    name: String,
    ranges: ScenarioRanges,
}

#[derive(Serialize, Deserialize)]
struct ScenarioRepr {
    name: String,
    benign: Interval,
    malignant: Interval,
}

impl TryFrom<ScenarioRepr> for Scenario {
    type Error = Error;

    fn try_from(r: ScenarioRepr) -> Result<Self> {
        Scenario::new(r.name, r.benign, r.malignant)
    }
}

impl From<Scenario> for ScenarioRepr {
    fn from(s: Scenario) -> Self {
        ScenarioRepr { name: s.name, benign: s.ranges.benign, malignant: s.ranges.malignant }
    }
}

impl Scenario {
    pub fn new(name: impl Into<String>, benign: Interval, malignant: Interval) -> Result<Self> {
        let name = name.into();
        for (side, iv) in [("benign", &benign), ("malignant", &malignant)] {
            if !iv.lo.is_finite() || !iv.hi.is_finite() || iv.is_empty() {
                return Err(Error::config(alloc::format!("scenario {name}: {side} range {iv} is empty")));
            }
        }
        if benign.intersects(&malignant) {
            return Err(Error::config(alloc::format!(
                "scenario {name}: benign range {benign} overlaps malignant range {malignant}"
            )));
        }
        Ok(Scenario { name, ranges: ScenarioRanges { benign, malignant } })
    }

    pub fn from_ranges(name: impl Into<String>, ranges: ScenarioRanges) -> Result<Self> {
        Scenario::new(name, ranges.benign, ranges.malignant)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ranges(&self) -> ScenarioRanges {
        self.ranges
    }

    /// `None` means the score falls in neither range and is excluded.
    pub fn classify(&self, score: AverageScore) -> Option<Label> {
        if self.ranges.benign.contains(score.0) {
            Some(Label::Benign)
        } else if self.ranges.malignant.contains(score.0) {
            Some(Label::Malignant)
        } else {
            None
        }
    }
}

/// The default A–F table. A excludes the uncertain middle, B excludes a
/// narrower band, and C–F move a single division threshold from the benign
/// side toward the malignant side.
pub fn default_scenario_table() -> BTreeMap<String, ScenarioRanges> {
    let entries = [
        ("A", Interval::closed(1.0, 2.0), Interval::closed(4.0, 5.0)),
        ("B", Interval::closed_open(1.0, 2.5), Interval::open_closed(3.5, 5.0)),
        ("C", Interval::closed_open(1.0, 2.5), Interval::closed(2.5, 5.0)),
        ("D", Interval::closed_open(1.0, 3.0), Interval::closed(3.0, 5.0)),
        ("E", Interval::closed(1.0, 3.0), Interval::open_closed(3.0, 5.0)),
        ("F", Interval::closed_open(1.0, 3.5), Interval::closed(3.5, 5.0)),
    ];
    entries
        .into_iter()
        .map(|(name, benign, malignant)| (name.to_string(), ScenarioRanges { benign, malignant }))
        .collect()
}

/// Looks up a default scenario by name (`"A"`..`"F"`).
pub fn default_scenario(name: &str) -> Option<Scenario> {
    let ranges = *default_scenario_table().get(name)?;
    Scenario::from_ranges(name, ranges).ok()
}

/// Default scenarios in sweep order A→F.
pub fn default_scenarios() -> Vec<Scenario> {
    default_scenario_table()
        .into_iter()
        .map(|(name, ranges)| Scenario::from_ranges(name, ranges).expect("default table is well-formed"))
        .collect()
}

/// Output of [`assign_labels`]: every input record lands in exactly one of
/// `labels` or `excluded`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub labels: BTreeMap<String, Label>,
    pub excluded: Vec<String>,
}

impl LabelAssignment {
    pub fn len(&self) -> usize {
        self.labels.len() + self.excluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assign_labels(records: &[SampleRecord], scenario: &Scenario) -> Result<LabelAssignment> {
    let mut out = LabelAssignment::default();
    for record in records {
        match scenario.classify(average_score(record)?) {
            Some(label) => {
                if out.labels.insert(record.id.clone(), label).is_some() {
                    return Err(Error::DuplicateId(record.id.clone()));
                }
            }
            None => out.excluded.push(record.id.clone()),
        }
    }
    Ok(out)
}

/// Verified labels of a reference set, keyed by id.
pub fn verified_labels(records: &[SampleRecord]) -> Result<BTreeMap<String, Label>> {
    let mut labels = BTreeMap::new();
    for record in records {
        let label = record.verified_label.ok_or(Error::Empty("verified label"))?;
        if labels.insert(record.id.clone(), label).is_some() {
            return Err(Error::DuplicateId(record.id.clone()));
        }
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub benign: usize,
    pub malignant: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.benign + self.malignant
    }

    /// Majority over minority count; `None` when a class is empty.
    pub fn imbalance_ratio(&self) -> Option<f64> {
        let (lo, hi) = if self.benign < self.malignant {
            (self.benign, self.malignant)
        } else {
            (self.malignant, self.benign)
        };
        (lo > 0).then(|| hi as f64 / lo as f64)
    }
}

pub fn label_distribution<'a, I>(labels: I) -> LabelCounts
where
    I: IntoIterator<Item = &'a Label>,
{
    let mut counts = LabelCounts::default();
    for label in labels {
        match label {
            Label::Benign => counts.benign += 1,
            Label::Malignant => counts.malignant += 1,
        }
    }
    counts
}

/// Assignment of sample ids to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.as_str()).collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &f)| f != fold).map(|(id, _)| id.as_str()).collect()
    }
}

/// Stratified k-fold split: each class is shuffled with the seed and dealt
/// round-robin, the second class continuing where the first stopped so fold
/// totals stay within one of each other as well.
pub fn stratified_kfold(labels: &BTreeMap<String, Label>, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::config(alloc::format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = rng::seeded(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0usize;
    for class in [Label::Benign, Label::Malignant] {
        let mut ids: Vec<&String> = labels.iter().filter(|(_, &l)| l == class).map(|(id, _)| id).collect();
        if ids.len() < k {
            return Err(Error::TooFewSamples { class: class.name(), count: ids.len(), required: k });
        }
        ids.shuffle(&mut rng);
        for id in ids {
            assignments.insert(id.clone(), next % k);
            next += 1;
        }
    }
    Ok(FoldSplit { k, assignments })
}
