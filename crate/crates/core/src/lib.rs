//! Re-labeling of noisily annotated binary datasets against a small
//! verified reference set.
//!
//! The crate is `no_std` and only needs `alloc`. It covers:
//!
//! * [`dataset`]: sample records, rater-score averaging, scenario label
//!   assignment and stratified folds.
//! * [`net`]: a dense network with hand-written backpropagation, used both
//!   as a sigmoid classifier and as an embedding backbone.
//! * [`siamese`]: contrastive metric learning and similarity ranking.
//! * [`relabel`]: the annotator and comparator re-labeling strategies.
//! * [`metrics`] and [`experiment`]: confusion-matrix metrics and the
//!   cross-validated study protocols.
//! * [`synth`]: a generator of biased multi-rater data with known ground truth.
//!
//! File formats, reports and the command-line front end live in the
//! `relabel-cli` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod net;
pub mod relabel;
pub mod rng;
pub mod siamese;
pub mod synth;

pub use dataset::{AverageScore, FoldSplit, Interval, Label, LabelAssignment, SampleRecord, Scenario};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use net::{NetConfig, NetParams, TrainConfig};
pub use relabel::{RelabelConfig, RelabelOutcome};
