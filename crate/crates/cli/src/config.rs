//! Pipeline configuration: a JSON file whose values explicit command-line
//! flags override.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use relabel_core::dataset::{self, ScenarioRanges};
use relabel_core::experiment::{Case, ExperimentSpec};
use relabel_core::net::{NetConfig, TrainConfig};
use relabel_core::relabel::{Mode, ModelSetup, RelabelConfig, Strategy};
use relabel_core::siamese::ContrastiveConfig;
use relabel_core::synth::GeneratorConfig;
use relabel_core::Scenario;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{self, DataFormat};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "RELABEL_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub noisy: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Scenario table JSON replacing the built-in A–F table.
    pub scenarios: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub case: Option<Case>,
    /// Explicit experiment seeds; otherwise `seed .. seed + n_seeds`.
    pub seeds: Option<Vec<u64>>,
    pub n_seeds: u64,
    pub folds: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { case: None, seeds: None, n_seeds: 10, folds: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// The invocation seed; every random stream is derived from it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    /// Inline scenario table (takes precedence over `paths.scenarios`).
    pub scenario_table: Option<BTreeMap<String, ScenarioRanges>>,
    pub scenario: Option<String>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub relabel: RelabelConfig,
    pub experiment: ExperimentSection,
    pub format: Option<DataFormat>,
    pub paths: Paths,
}

/// Flags mirroring config keys. Every flag that is given overrides the
/// config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Invocation seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: config, else $RELABEL_OUTPUT_DIR, else `out`]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Noisy (rater-scored) dataset, .csv or .json
    #[arg(long, global = true)]
    pub noisy: Option<PathBuf>,
    /// Reference (verified) dataset, .csv or .json
    #[arg(long, global = true)]
    pub reference: Option<PathBuf>,
    /// Ground-truth CSV (`id,true_label`)
    #[arg(long, global = true)]
    pub ground_truth: Option<PathBuf>,
    /// Scenario table JSON
    #[arg(long, global = true)]
    pub scenarios: Option<PathBuf>,
    /// Scenario name
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Dataset file format for outputs
    #[arg(long, global = true, value_enum)]
    pub format: Option<DataFormat>,

    #[arg(long, global = true)]
    pub n_noisy: Option<usize>,
    #[arg(long, global = true)]
    pub n_reference: Option<usize>,
    #[arg(long, global = true)]
    pub feature_dim: Option<usize>,
    #[arg(long, global = true)]
    pub class_separation: Option<f64>,
    #[arg(long, global = true)]
    pub rater_count: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub rater_bias: Option<f64>,
    #[arg(long, global = true)]
    pub rater_noise_std: Option<f64>,
    #[arg(long, global = true)]
    pub uncertain_band: Option<f64>,

    /// Hidden layer widths, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub margin: Option<f64>,

    #[arg(long, global = true, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub top_fraction: Option<f64>,
    /// Also relabel samples the scenario excluded
    #[arg(long, global = true)]
    pub include_uncertain: Option<bool>,

    #[arg(long, global = true, value_parser = parse_case)]
    pub case: Option<Case>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true)]
    pub n_seeds: Option<u64>,
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("unknown value `{s}`"))
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    parse_enum(s)
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    parse_enum(s)
}

fn parse_case(s: &str) -> Result<Case, String> {
    parse_enum(s)
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = io::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Config file (if any) with `overrides` applied on top.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut config = match path {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        config.apply(overrides);
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        set(&mut self.seed, &o.seed);
        let paths = &mut self.paths;
        for (slot, value) in [
            (&mut paths.out_dir, &o.out_dir),
            (&mut paths.noisy, &o.noisy),
            (&mut paths.reference, &o.reference),
            (&mut paths.ground_truth, &o.ground_truth),
            (&mut paths.scenarios, &o.scenarios),
        ] {
            if value.is_some() {
                slot.clone_from(value);
            }
        }
        if o.scenario.is_some() {
            self.scenario.clone_from(&o.scenario);
        }
        if o.format.is_some() {
            self.format = o.format;
        }
        let g = &mut self.generator;
        set(&mut g.n_noisy, &o.n_noisy);
        set(&mut g.n_reference, &o.n_reference);
        set(&mut g.feature_dim, &o.feature_dim);
        set(&mut g.class_separation, &o.class_separation);
        set(&mut g.rater_count, &o.rater_count);
        set(&mut g.rater_bias, &o.rater_bias);
        set(&mut g.rater_noise_std, &o.rater_noise_std);
        set(&mut g.uncertain_band, &o.uncertain_band);
        set(&mut self.net.hidden_dims, &o.hidden_dims);
        set(&mut self.net.embed_dim, &o.embed_dim);
        set(&mut self.train.learning_rate, &o.learning_rate);
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.batch_size, &o.batch_size);
        set(&mut self.contrastive.margin, &o.margin);
        set(&mut self.relabel.strategy, &o.strategy);
        set(&mut self.relabel.mode, &o.mode);
        set(&mut self.relabel.top_fraction, &o.top_fraction);
        set(&mut self.relabel.include_uncertain, &o.include_uncertain);
        if o.case.is_some() {
            self.experiment.case = o.case;
        }
        set(&mut self.experiment.folds, &o.folds);
        if let Some(n) = o.n_seeds {
            self.experiment.n_seeds = n;
            self.experiment.seeds = None;
        }
        if o.seed.is_some() {
            self.experiment.seeds = None;
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn data_format(&self) -> DataFormat {
        self.format.unwrap_or(DataFormat::Csv)
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
        path.as_deref().ok_or_else(|| CliError::usage(format!("missing input: pass --{flag} or set paths.{}", flag.replace('-', "_"))))
    }

    pub fn scenario_table(&self) -> CliResult<BTreeMap<String, ScenarioRanges>> {
        if let Some(t) = &self.scenario_table {
            return Ok(t.clone());
        }
        match &self.paths.scenarios {
            Some(p) => io::read_scenario_table(p),
            None => Ok(dataset::default_scenario_table()),
        }
    }

    /// The named scenario; an unknown name is a usage error listing the
    /// known ones.
    pub fn scenario_named(&self, name: &str) -> CliResult<Scenario> {
        let table = self.scenario_table()?;
        match table.get(name) {
            Some(ranges) => Ok(Scenario::from_ranges(name, *ranges)?),
            None => Err(CliError::usage(format!(
                "unknown scenario `{name}`; known scenarios: {}",
                table.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn scenario(&self) -> CliResult<Option<Scenario>> {
        self.scenario.as_deref().map(|n| self.scenario_named(n)).transpose()
    }

    pub fn require_scenario(&self) -> CliResult<Scenario> {
        self.scenario()?.ok_or_else(|| CliError::usage("missing scenario: pass --scenario or set `scenario`"))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig { seed: self.seed, ..self.generator.clone() }
    }

    pub fn setup(&self) -> ModelSetup {
        ModelSetup { net: self.net.clone(), train: self.train.clone(), contrastive: self.contrastive.clone() }
    }

    pub fn experiment_seeds(&self) -> Vec<u64> {
        self.experiment.seeds.clone().unwrap_or_else(|| (self.seed..self.seed + self.experiment.n_seeds).collect())
    }

    pub fn experiment_spec(&self) -> CliResult<ExperimentSpec> {
        let case = self.experiment.case.ok_or_else(|| CliError::usage("missing case: pass --case or set experiment.case"))?;
        let spec = ExperimentSpec {
            case,
            scenario: self.scenario()?,
            relabel: (case == Case::RelabelRetrain).then(|| self.relabel.clone()),
            seeds: self.experiment_seeds(),
            folds: self.experiment.folds,
            setup: self.setup(),
        };
        spec.validate()?;
        Ok(spec)
    }
}
