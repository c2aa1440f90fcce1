//! Pairwise metric learning over a shared embedding network.
//!
//! Both branches of a pair run through the same [`NetParams`], so weight
//! tying needs no bookkeeping: the pair gradient is the sum of the two
//! branch gradients accumulated into one store.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::net::{self, Gradients, Head, NetConfig, NetParams, Objective, Schedule, TrainConfig, TrainLog};
use crate::rng::{self, ChaCha8Rng};

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), found: v.len() });
    }
    Ok(libm::sqrt(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()))
}

/// `d²` for same-class pairs, `max(0, margin - d)²` otherwise.
pub fn contrastive_loss(distance: f64, same_class: bool, margin: f64) -> Result<f64> {
    if distance < 0.0 || distance.is_nan() {
        return Err(Error::NegativeDistance(distance));
    }
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::config("contrastive margin must be > 0"));
    }
    Ok(if same_class {
        distance * distance
    } else {
        let gap = (margin - distance).max(0.0);
        gap * gap
    })
}

/// Loss and its gradient with respect to both embeddings. The gradient of
/// the hinge at `d = 0` is taken as zero.
pub fn contrastive_pair_gradient(u: &[f64], v: &[f64], same_class: bool, margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = euclidean_distance(u, v)?;
    let loss = contrastive_loss(d, same_class, margin)?;
    // dL/du = coef * (u - v), dL/dv = -dL/du
    let coef = if same_class {
        2.0
    } else if d < margin && d > 0.0 {
        -2.0 * (margin - d) / d
    } else {
        0.0
    };
    let du: Vec<f64> = u.iter().zip(v).map(|(a, b)| coef * (a - b)).collect();
    let dv = du.iter().map(|g| -g).collect();
    Ok((loss, du, dv))
}

/// Two samples plus whether they share a class (`true` = same class).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub id_a: String,
    pub id_b: String,
    pub same_class: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub margin: f64,
    /// Pairs drawn per epoch; `None` means four per training reference.
    pub pairs_per_epoch: Option<usize>,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { margin: 1.0, pairs_per_epoch: None, positive_fraction: 0.5, seed: 0 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("contrastive margin must be finite and > 0"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::config("positive_fraction must lie strictly between 0 and 1"));
        }
        Ok(())
    }

    pub fn pairs_for(&self, n_references: usize) -> usize {
        self.pairs_per_epoch.unwrap_or(4 * n_references)
    }
}

/// A labeled reference sample borrowed from a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference<'a> {
    pub id: &'a str,
    pub features: &'a [f64],
    pub label: Label,
}

/// Pair of indices into a reference slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct IndexPair {
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
}

/// Draws `count` pairs, `round(positive_fraction * count)` of them same-class.
/// Positive pairs pick a class in proportion to its size.
pub(crate) fn sample_index_pairs(
    labels: &[Label],
    count: usize,
    positive_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<IndexPair>> {
    let benign: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Benign).collect();
    let malignant: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Malignant).collect();
    let n_pos = libm::round(positive_fraction * count as f64) as usize;
    let n_neg = count - n_pos.min(count);
    for (class, members) in [(Label::Benign, &benign), (Label::Malignant, &malignant)] {
        if n_pos > 0 && members.len() < 2 {
            return Err(Error::TooFewSamples { class: class.name(), count: members.len(), required: 2 });
        }
        if n_neg > 0 && members.is_empty() {
            return Err(Error::TooFewSamples { class: class.name(), count: 0, required: 1 });
        }
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..n_pos.min(count) {
        let pool = if rng.random_range(0..labels.len()) < benign.len() { &benign } else { &malignant };
        let i = rng.random_range(0..pool.len());
        let mut j = rng.random_range(0..pool.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(IndexPair { a: pool[i], b: pool[j], same_class: true });
    }
    for _ in 0..n_neg {
        let x = benign[rng.random_range(0..benign.len())];
        let y = malignant[rng.random_range(0..malignant.len())];
        let (a, b) = if rng.random_bool(0.5) { (x, y) } else { (y, x) };
        pairs.push(IndexPair { a, b, same_class: false });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Samples `pairs_for(|references|)` labeled pairs, deterministic in
/// `config.seed`.
pub fn sample_pairs(references: &[Reference<'_>], config: &ContrastiveConfig) -> Result<Vec<PairSample>> {
    config.validate()?;
    let labels: Vec<Label> = references.iter().map(|r| r.label).collect();
    let mut rng = rng::seeded(config.seed);
    let pairs = sample_index_pairs(&labels, config.pairs_for(references.len()), config.positive_fraction, &mut rng)?;
    Ok(pairs
        .into_iter()
        .map(|p| PairSample {
            id_a: String::from(references[p.a].id),
            id_b: String::from(references[p.b].id),
            same_class: p.same_class,
        })
        .collect())
}

/// One training pair of borrowed feature vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeaturePair<'a> {
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub same_class: bool,
}

/// Contrastive loss through both branches of the shared network.
#[derive(Clone, Copy, Debug)]
pub struct Contrastive {
    pub margin: f64,
}

impl Objective<FeaturePair<'_>> for Contrastive {
    fn accumulate(&self, params: &NetParams, pair: &FeaturePair<'_>, grads: &mut Gradients) -> Result<f64> {
        let ta = params.trace(pair.a)?;
        let tb = params.trace(pair.b)?;
        let (loss, du, dv) = contrastive_pair_gradient(ta.output(), tb.output(), pair.same_class, self.margin)?;
        params.backward(&ta, &du, grads);
        params.backward(&tb, &dv, grads);
        Ok(loss)
    }

    fn loss(&self, params: &NetParams, pair: &FeaturePair<'_>) -> Result<f64> {
        let d = euclidean_distance(&params.forward(pair.a)?, &params.forward(pair.b)?)?;
        contrastive_loss(d, pair.same_class, self.margin)
    }
}

/// Sum-reduced contrastive loss and gradient over a batch of pairs.
pub fn contrastive_backprop(params: &NetParams, batch: &[FeaturePair<'_>], margin: f64) -> Result<(f64, Gradients)> {
    net::backprop(params, batch, &Contrastive { margin })
}

fn pairs_from<'a>(refs: &[Reference<'a>], pairs: &[IndexPair]) -> Vec<FeaturePair<'a>> {
    pairs
        .iter()
        .map(|p| FeaturePair { a: refs[p.a].features, b: refs[p.b].features, same_class: p.same_class })
        .collect()
}

/// Trains the embedding network on freshly sampled pairs every epoch. The
/// validation references are held out and scored on a fixed pair set; when
/// they cannot form pairs, selection falls back to the training loss.
pub fn train_siamese(
    net: &NetConfig,
    references: &[Reference<'_>],
    train_config: &TrainConfig,
    pair_config: &ContrastiveConfig,
) -> Result<(NetParams, TrainLog)> {
    if net.head != Head::Embedding {
        return Err(Error::config("siamese training needs an embedding head"));
    }
    train_config.validate()?;
    pair_config.validate()?;
    if references.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    if let Some(bad) = references.iter().find(|r| r.features.len() != net.input_dim) {
        return Err(Error::DimensionMismatch { expected: net.input_dim, found: bad.features.len() });
    }
    let init = NetParams::init(net)?;
    let mut rng = rng::seeded(train_config.seed);
    let (train, val) = net::validation_split(references, |r| r.label, train_config.validation_fraction, &mut rng);
    let train_labels: Vec<Label> = train.iter().map(|r| r.label).collect();
    let val_labels: Vec<Label> = val.iter().map(|r| r.label).collect();

    let mut pair_rng = rng::seeded(pair_config.seed);
    let val_pairs = sample_index_pairs(&val_labels, pair_config.pairs_for(val.len()), pair_config.positive_fraction, &mut pair_rng)
        .map(|p| pairs_from(&val, &p))
        .unwrap_or_default();
    // Fail early if the training references cannot form pairs at all.
    sample_index_pairs(&train_labels, 1, pair_config.positive_fraction, &mut rng::seeded(0))?;
    let n_pairs = pair_config.pairs_for(train.len());

    let mut log = TrainLog::default();
    let schedule = Schedule {
        lr: train_config.learning_rate,
        epochs: train_config.epochs,
        batch_size: train_config.batch_size,
        optimizer: train_config.optimizer,
    };
    let params = net::descend(
        &Contrastive { margin: pair_config.margin },
        init,
        schedule,
        &mut rng,
        |_| {
            let pairs = sample_index_pairs(&train_labels, n_pairs, pair_config.positive_fraction, &mut pair_rng)?;
            Ok(pairs_from(&train, &pairs))
        },
        &val_pairs,
        &mut log,
    )?;
    Ok((params, log))
}

/// Embedded reference set, ready for repeated similarity queries.
#[derive(Clone, Debug)]
pub struct ReferenceIndex {
    ids: Vec<String>,
    labels: Vec<Label>,
    embeddings: Vec<Vec<f64>>,
}

/// One entry of a similarity ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
    pub label: Label,
}

impl ReferenceIndex {
    pub fn build(params: &NetParams, references: &[Reference<'_>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Empty("reference set"));
        }
        let embeddings = references.iter().map(|r| params.forward(r.features)).collect::<Result<Vec<_>>>()?;
        Ok(ReferenceIndex {
            ids: references.iter().map(|r| String::from(r.id)).collect(),
            labels: references.iter().map(|r| r.label).collect(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// References sorted by ascending distance to `embedding`, ties broken
    /// by id.
    pub fn rank(&self, embedding: &[f64]) -> Result<Vec<Neighbor>> {
        let mut ranked = self
            .embeddings
            .iter()
            .zip(&self.ids)
            .zip(&self.labels)
            .map(|((e, id), &label)| Ok(Neighbor { id: id.clone(), distance: euclidean_distance(embedding, e)?, label }))
            .collect::<Result<Vec<_>>>()?;
        ranked.sort_by(|x, y| x.distance.total_cmp(&y.distance).then_with(|| x.id.cmp(&y.id)));
        Ok(ranked)
    }
}

/// Ranks `references` by embedding distance to `query` (most similar first).
pub fn similarity_scores(params: &NetParams, query: &[f64], references: &[Reference<'_>]) -> Result<Vec<(String, f64)>> {
    let index = ReferenceIndex::build(params, references)?;
    let ranked = index.rank(&params.forward(query)?)?;
    Ok(ranked.into_iter().map(|n| (n.id, n.distance)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;
    use crate::net::Activation;
    use proptest::prelude::*;

    fn refs_from<'a>(ids: &'a [String], feats: &'a [Vec<f64>], labels: &[Label]) -> Vec<Reference<'a>> {
        ids.iter()
            .zip(feats)
            .zip(labels)
            .map(|((id, f), &label)| Reference { id, features: f, label })
            .collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0], &[3.0, 4.0]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(0.0, true, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(1.0, false, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(0.5, false, 1.0).unwrap(), 0.25);
        assert_eq!(contrastive_loss(2.0, true, 1.0).unwrap(), 4.0);
        assert!(matches!(contrastive_loss(-0.1, true, 1.0), Err(Error::NegativeDistance(_))));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let u = [0.3, -0.2, 0.5];
        let v = [0.1, 0.2, 0.1];
        for same in [true, false] {
            let (_, du, dv) = contrastive_pair_gradient(&u, &v, same, 1.0).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let f = |uu: &[f64], vv: &[f64]| contrastive_loss(euclidean_distance(uu, vv).unwrap(), same, 1.0).unwrap();
                let mut up = u;
                let mut um = u;
                up[i] += h;
                um[i] -= h;
                assert!(((f(&up, &v) - f(&um, &v)) / (2.0 * h) - du[i]).abs() < 1e-6);
                let mut vp = v;
                let mut vm = v;
                vp[i] += h;
                vm[i] -= h;
                assert!(((f(&u, &vp) - f(&u, &vm)) / (2.0 * h) - dv[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pair_counts_follow_positive_fraction() {
        let ids: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
        let feats = vec![vec![0.0]; 4];
        let labels = [Label::Benign, Label::Benign, Label::Malignant, Label::Malignant];
        let refs = refs_from(&ids, &feats, &labels);
        let config = ContrastiveConfig { pairs_per_epoch: Some(10), seed: 3, ..ContrastiveConfig::default() };
        let pairs = sample_pairs(&refs, &config).unwrap();
        assert_eq!(pairs.len(), 10);
        assert_eq!(pairs.iter().filter(|p| p.same_class).count(), 5);
        assert!(pairs.iter().all(|p| p.id_a != p.id_b));
        for p in &pairs {
            let la = labels[ids.iter().position(|i| *i == p.id_a).unwrap()];
            let lb = labels[ids.iter().position(|i| *i == p.id_b).unwrap()];
            assert_eq!(p.same_class, la == lb);
        }
        assert_eq!(pairs, sample_pairs(&refs, &config).unwrap());
    }

    #[test]
    fn pair_sampling_needs_two_per_class() {
        let ids: Vec<String> = (0..3).map(|i| format!("r{i}")).collect();
        let feats = vec![vec![0.0]; 3];
        let refs = refs_from(&ids, &feats, &[Label::Benign, Label::Malignant, Label::Malignant]);
        assert!(matches!(
            sample_pairs(&refs, &ContrastiveConfig::default()),
            Err(Error::TooFewSamples { class: "benign", .. })
        ));
    }

    fn tiny_embedding(seed: u64) -> NetParams {
        let config = NetConfig { input_dim: 3, hidden_dims: vec![4], embed_dim: 2, activation: Activation::Tanh, head: Head::Embedding, seed };
        NetParams::init(&config).unwrap()
    }

    #[test]
    fn identical_same_class_pair_has_zero_loss_and_gradient() {
        let p = tiny_embedding(1);
        let x = [0.5, -0.5, 1.0];
        let (loss, g) = contrastive_backprop(&p, &[FeaturePair { a: &x, b: &x, same_class: true }], 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn tied_gradient_equals_two_copy_oracle() {
        let p = tiny_embedding(2);
        let (xa, xb) = ([0.1, 0.7, -0.3], [-0.4, 0.2, 0.9]);
        for same in [true, false] {
            let (_, tied) = contrastive_backprop(&p, &[FeaturePair { a: &xa, b: &xb, same_class: same }], 1.0).unwrap();
            // Two independent copies, each receiving its own branch gradient.
            let (copy_a, copy_b) = (p.clone(), p.clone());
            let (ta, tb) = (copy_a.trace(&xa).unwrap(), copy_b.trace(&xb).unwrap());
            let (_, du, dv) = contrastive_pair_gradient(ta.output(), tb.output(), same, 1.0).unwrap();
            let mut ga = Gradients::zeros_like(&copy_a);
            let mut gb = Gradients::zeros_like(&copy_b);
            copy_a.backward(&ta, &du, &mut ga);
            copy_b.backward(&tb, &dv, &mut gb);
            ga.add(&gb);
            for (t, o) in tied.flat().iter().zip(ga.flat()) {
                assert!((t - o).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ranking_contract() {
        let p = tiny_embedding(3);
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| String::from(*s)).collect();
        let feats = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        let refs = refs_from(&ids, &feats, &[Label::Benign, Label::Malignant, Label::Benign]);
        let ranked = similarity_scores(&p, &[1.0, 0.0, 0.0], &refs).unwrap();
        // "b" and "c" tie at distance 0; id order breaks the tie.
        assert_eq!(ranked[0], (String::from("b"), 0.0));
        assert_eq!(ranked[1], (String::from("c"), 0.0));
        assert_eq!(ranked[2].0, "a");
        assert_eq!(similarity_scores(&p, &[1.0, 0.0, 0.0], &refs[..1]).unwrap().len(), 1);
        assert!(similarity_scores(&p, &[1.0, 0.0, 0.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(u in proptest::collection::vec(-10.0f64..10.0, 4), v in proptest::collection::vec(-10.0f64..10.0, 4)) {
            prop_assert_eq!(euclidean_distance(&u, &v).unwrap(), euclidean_distance(&v, &u).unwrap());
        }

        #[test]
        fn contrastive_zero_set(d in 0.0f64..3.0, same in any::<bool>(), margin in 0.1f64..2.0) {
            let loss = contrastive_loss(d, same, margin).unwrap();
            prop_assert!(loss >= 0.0);
            let zero_expected = if same { d == 0.0 } else { d >= margin };
            prop_assert_eq!(loss == 0.0, zero_expected);
        }

        #[test]
        fn ranking_is_a_sorted_permutation(feats in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..12)) {
            let p = tiny_embedding(4);
            let ids: Vec<String> = (0..feats.len()).map(|i| format!("r{i:02}")).collect();
            let labels = vec![Label::Benign; feats.len()];
            let refs = refs_from(&ids, &feats, &labels);
            let ranked = similarity_scores(&p, &[0.0, 0.0, 0.0], &refs).unwrap();
            let mut seen: Vec<_> = ranked.iter().map(|(id, _)| id.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, ids);
            prop_assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}
