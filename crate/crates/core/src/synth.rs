//! Synthetic stand-in for a noisily rated dataset plus a small verified
//! reference set.
//!
//! Features come from two isotropic unit-variance clusters whose means sit
//! `class_separation` apart along the first axis. A sample's true class is
//! its side of the midpoint boundary (each cluster is truncated at the
//! boundary), so the feature vector fully determines the truth and all label
//! noise comes from the raters.
//!
//! Raters see a latent margin `m = clamp(t / scale, -1, 1)`, where `t` is the
//! signed distance to the boundary and `scale = class_separation / 2 + 2`.
//! Inside the uncertain band (`|m| < uncertain_band / 2`) the margin carries
//! no information; outside it is rescaled back onto `[-1, 1]`. Each rater then
//! scores `clamp(round(3 + gain * m + rater_bias + noise), 1, 5)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, SampleRecord};
use crate::error::{Error, Result};
use crate::rng;

/// Cluster standard deviations between a class mean and the point where the
/// latent margin saturates.
pub const LATENT_TAIL: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_noisy: usize,
    pub n_reference: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub rater_count: usize,
    /// Additive shift toward malignancy in score space.
    pub rater_bias: f64,
    pub rater_noise_std: f64,
    /// Width of the latent region around the boundary that maps to score 3.
    pub uncertain_band: f64,
    pub score_gain: f64,
    pub balanced_reference: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_noisy: 922,
            n_reference: 180,
            feature_dim: 16,
            class_separation: 2.5,
            rater_count: 4,
            rater_bias: 0.8,
            rater_noise_std: 0.7,
            uncertain_band: 0.6,
            score_gain: 2.0,
            balanced_reference: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.rater_count == 0 {
            return Err(Error::config("feature_dim and rater_count must be >= 1"));
        }
        if self.balanced_reference && !self.n_reference.is_multiple_of(2) {
            return Err(Error::config(format!("a balanced reference set needs an even size, got {}", self.n_reference)));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("rater_noise_std", self.rater_noise_std),
            ("score_gain", self.score_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and > 0")));
            }
        }
        if !(self.uncertain_band >= 0.0 && self.uncertain_band < 2.0) {
            return Err(Error::config("uncertain_band must lie in [0, 2)"));
        }
        if !self.rater_bias.is_finite() {
            return Err(Error::config("rater_bias must be finite"));
        }
        Ok(())
    }

    /// Signed boundary distance at which the latent margin reaches ±1.
    pub fn latent_scale(&self) -> f64 {
        self.class_separation / 2.0 + LATENT_TAIL
    }

    /// Rater-visible margin for a signed boundary distance.
    pub fn latent_margin(&self, t: f64) -> f64 {
        let m = (t / self.latent_scale()).clamp(-1.0, 1.0);
        let half = self.uncertain_band / 2.0;
        if m.abs() < half {
            0.0
        } else {
            m.signum() * (m.abs() - half) / (1.0 - half)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Rater scores only, no verified labels.
    pub noisy: Vec<SampleRecord>,
    /// Verified labels equal to the ground truth.
    pub reference: Vec<SampleRecord>,
    /// Truth for every noisy and reference id.
    pub ground_truth: BTreeMap<String, Label>,
}

struct Sampler<'c> {
    config: &'c GeneratorConfig,
    rng: rng::ChaCha8Rng,
    noise: Normal<f64>,
}

impl Sampler<'_> {
    fn boundary_distance(&mut self, label: Label) -> f64 {
        let mean = match label {
            Label::Malignant => self.config.class_separation / 2.0,
            Label::Benign => -self.config.class_separation / 2.0,
        };
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let t = mean + z;
            if (label == Label::Malignant && t > 0.0) || (label == Label::Benign && t < 0.0) {
                return t;
            }
        }
    }

    fn record(&mut self, id: String, label: Label, verified: bool) -> SampleRecord {
        let t = self.boundary_distance(label);
        let mut features = Vec::with_capacity(self.config.feature_dim);
        features.push(t);
        for _ in 1..self.config.feature_dim {
            features.push(StandardNormal.sample(&mut self.rng));
        }
        let center = 3.0 + self.config.score_gain * self.config.latent_margin(t) + self.config.rater_bias;
        let rater_scores = (0..self.config.rater_count)
            .map(|_| libm::round(center + self.noise.sample(&mut self.rng)).clamp(1.0, 5.0) as u8)
            .collect();
        SampleRecord { id, features, rater_scores, verified_label: verified.then_some(label) }
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<SyntheticData> {
    config.validate()?;
    let noise = Normal::new(0.0, config.rater_noise_std).map_err(|e| Error::config(format!("rater noise: {e}")))?;
    let mut sampler = Sampler { config, rng: rng::seeded(config.seed), noise };
    let mut ground_truth = BTreeMap::new();

    let mut noisy = Vec::with_capacity(config.n_noisy);
    for i in 0..config.n_noisy {
        let label = if sampler.rng.random_bool(0.5) { Label::Malignant } else { Label::Benign };
        let record = sampler.record(format!("n{i:05}"), label, false);
        ground_truth.insert(record.id.clone(), label);
        noisy.push(record);
    }

    let mut reference = Vec::with_capacity(config.n_reference);
    for i in 0..config.n_reference {
        let label = if config.balanced_reference {
            if i % 2 == 0 { Label::Benign } else { Label::Malignant }
        } else if sampler.rng.random_bool(0.5) {
            Label::Malignant
        } else {
            Label::Benign
        };
        let record = sampler.record(format!("r{i:04}"), label, true);
        ground_truth.insert(record.id.clone(), label);
        reference.push(record);
    }
    Ok(SyntheticData { noisy, reference, ground_truth })
}

/// Fraction of `labels` matching the ground truth.
pub fn oracle_accuracy(labels: &BTreeMap<String, Label>, ground_truth: &BTreeMap<String, Label>) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut correct = 0usize;
    for (id, label) in labels {
        let truth = ground_truth.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        correct += usize::from(truth == label);
    }
    Ok(correct as f64 / labels.len() as f64)
}
