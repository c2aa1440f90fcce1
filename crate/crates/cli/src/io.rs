//! On-disk formats: dataset CSV/JSON, scenario tables, ground truth, pair
//! lists, relabel outcomes and histograms, network parameters and training
//! logs.
//!
//! CSV outputs start with a `# seed=<n>` comment line; readers skip `#`
//! lines. JSON outputs carry the seed as a top-level `seed` field.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use relabel_core::dataset::{self, ScenarioRanges};
use relabel_core::net::{EpochRecord, NetParams};
use relabel_core::relabel::{RelabelHistogram, RelabelOutcome};
use relabel_core::siamese::PairSample;
use relabel_core::{Label, SampleRecord, Scenario};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Ok(DataFormat::Csv),
            Some(e) if e.eq_ignore_ascii_case("json") => Ok(DataFormat::Json),
            _ => Err(CliError::usage(format!("{}: cannot infer format, expected a .csv or .json file", path.display()))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Json => "json",
        }
    }
}

fn seed_comment(seed: u64) -> String {
    format!("# seed={seed}\n")
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input)
}

fn csv_error(source: &str, e: csv::Error) -> CliError {
    CliError::data(format!("{source}: {e}"))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, csv::Position::line)
}

fn field_error(source: &str, line: u64, field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::data(format!("{source}: line {line}, field `{field}`: {msg}"))
}

fn check_header(source: &str, found: &csv::StringRecord, expected: &[&str]) -> CliResult<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(CliError::data(format!(
            "{source}: expected header `{}`, found `{}`",
            expected.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn parse_label(source: &str, line: u64, field: &str, raw: &str) -> CliResult<Option<Label>> {
    match raw.trim() {
        "" => Ok(None),
        s => {
            let v: i64 = s.parse().map_err(|_| field_error(source, line, field, format!("`{s}` is not 0 or 1")))?;
            Label::from_int(v).map(Some).map_err(|e| field_error(source, line, field, e))
        }
    }
}

fn label_field(label: Option<Label>) -> String {
    label.map_or_else(String::new, |l| l.as_u8().to_string())
}

/// Reads the dataset CSV schema `id,f0,...,f{D-1},scores,label`.
pub fn read_dataset_csv<R: Read>(input: R, source: &str) -> CliResult<Vec<SampleRecord>> {
    let mut reader = csv_reader(input);
    let header = reader.headers().map_err(|e| csv_error(source, e))?.clone();
    let dim = header.len().checked_sub(3).ok_or_else(|| CliError::data(format!("{source}: missing or short header")))?;
    let mut expected = vec![String::from("id")];
    expected.extend((0..dim).map(|i| format!("f{i}")));
    expected.extend(["scores".into(), "label".into()]);
    check_header(source, &header, &expected.iter().map(String::as_str).collect::<Vec<_>>())?;

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(source, e))?;
        let line = line_of(&row);
        let id = row[0].trim();
        if id.is_empty() {
            return Err(field_error(source, line, "id", "empty id"));
        }
        let features = (0..dim)
            .map(|i| {
                let raw = row[i + 1].trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| field_error(source, line, &expected[i + 1], format!("`{raw}` is not a finite number")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        let rater_scores = row[dim + 1]
            .split(';')
            .map(|s| {
                let s = s.trim();
                let v: i64 = s.parse().map_err(|_| field_error(source, line, "scores", format!("`{s}` is not an integer")))?;
                if !(1..=5).contains(&v) {
                    return Err(field_error(source, line, "scores", relabel_core::Error::ScoreOutOfRange { id: id.into(), score: v }));
                }
                Ok(v as u8)
            })
            .collect::<CliResult<Vec<u8>>>()?;
        let verified_label = parse_label(source, line, "label", &row[dim + 2])?;
        records.push(SampleRecord::new(id, features, rater_scores, verified_label).map_err(|e| field_error(source, line, "id", e))?);
    }
    dataset::validate_dataset(&records).context(source)?;
    Ok(records)
}

pub fn write_dataset_csv(records: &[SampleRecord], seed: u64) -> CliResult<Vec<u8>> {
    let dim = dataset::validate_dataset(records)?.unwrap_or(0);
    let mut out = seed_comment(seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec![String::from("id")];
        header.extend((0..dim).map(|i| format!("f{i}")));
        header.extend(["scores".into(), "label".into()]);
        w.write_record(&header).map_err(|e| csv_error("dataset", e))?;
        for r in records {
            let mut row = vec![r.id.clone()];
            row.extend(r.features.iter().map(f64::to_string));
            row.push(r.rater_scores.iter().map(u8::to_string).collect::<Vec<_>>().join(";"));
            row.push(label_field(r.verified_label));
            w.write_record(&row).map_err(|e| csv_error("dataset", e))?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    seed: u64,
    records: Vec<SampleRecord>,
}

/// Reads a JSON dataset: a bare array of records or `{seed, records}`.
pub fn read_dataset_json(text: &str, source: &str) -> CliResult<Vec<SampleRecord>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Bare(Vec<SampleRecord>),
        Wrapped(DatasetJson),
    }
    let records = match serde_json::from_str::<Doc>(text).map_err(|e| CliError::data(format!("{source}: {e}")))? {
        Doc::Bare(r) => r,
        Doc::Wrapped(d) => d.records,
    };
    dataset::validate_dataset(&records).context(source)?;
    Ok(records)
}

pub fn write_dataset_json(records: &[SampleRecord], seed: u64) -> CliResult<Vec<u8>> {
    dataset::validate_dataset(records)?;
    to_json(&DatasetJson { seed, records: records.to_vec() })
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_dataset(path: &Path) -> CliResult<Vec<SampleRecord>> {
    let format = DataFormat::from_path(path)?;
    let text = read_text(path)?;
    let source = path.display().to_string();
    match format {
        DataFormat::Csv => read_dataset_csv(text.as_bytes(), &source),
        DataFormat::Json => read_dataset_json(&text, &source),
    }
}

pub fn encode_dataset(records: &[SampleRecord], format: DataFormat, seed: u64) -> CliResult<Vec<u8>> {
    match format {
        DataFormat::Csv => write_dataset_csv(records, seed),
        DataFormat::Json => write_dataset_json(records, seed),
    }
}

/// Scenario table: name → `{benign: [lo, hi, lo_closed, hi_closed], malignant: [...]}`.
pub fn read_scenario_table(path: &Path) -> CliResult<BTreeMap<String, ScenarioRanges>> {
    let table: BTreeMap<String, ScenarioRanges> =
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    for (name, ranges) in &table {
        Scenario::from_ranges(name.clone(), *ranges).context(format!("{}: scenario `{name}`", path.display()))?;
    }
    Ok(table)
}

pub fn write_scenario_table(table: &BTreeMap<String, ScenarioRanges>) -> CliResult<Vec<u8>> {
    to_json(table)
}

pub fn write_ground_truth(truth: &BTreeMap<String, Label>, seed: u64) -> CliResult<Vec<u8>> {
    let mut out = seed_comment(seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["id", "true_label"]).map_err(|e| csv_error("ground truth", e))?;
        for (id, label) in truth {
            w.write_record([id.as_str(), &label.as_u8().to_string()]).map_err(|e| csv_error("ground truth", e))?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_ground_truth<R: Read>(input: R, source: &str) -> CliResult<BTreeMap<String, Label>> {
    let mut reader = csv_reader(input);
    check_header(source, reader.headers().map_err(|e| csv_error(source, e))?, &["id", "true_label"])?;
    let mut truth = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(source, e))?;
        let line = line_of(&row);
        let label = parse_label(source, line, "true_label", &row[1])?
            .ok_or_else(|| field_error(source, line, "true_label", "missing label"))?;
        if truth.insert(row[0].to_string(), label).is_some() {
            return Err(field_error(source, line, "id", relabel_core::Error::DuplicateId(row[0].to_string())));
        }
    }
    Ok(truth)
}

pub fn load_ground_truth(path: &Path) -> CliResult<BTreeMap<String, Label>> {
    read_ground_truth(read_text(path)?.as_bytes(), &path.display().to_string())
}

/// Scenario labels as `id,label,avg_score`; excluded ids have an empty label.
pub fn write_assigned_labels(records: &[SampleRecord], labels: &BTreeMap<String, Label>, seed: u64) -> CliResult<Vec<u8>> {
    let mut out = seed_comment(seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["id", "label", "avg_score"]).map_err(|e| csv_error("labels", e))?;
        for r in records {
            let avg = dataset::average_score(r)?.value();
            w.write_record([r.id.as_str(), &label_field(labels.get(&r.id).copied()), &avg.to_string()])
                .map_err(|e| csv_error("labels", e))?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_pairs(pairs: &[PairSample], seed: u64) -> CliResult<Vec<u8>> {
    let mut out = seed_comment(seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["id_a", "id_b", "same_class"]).map_err(|e| csv_error("pairs", e))?;
        for p in pairs {
            w.write_record([p.id_a.as_str(), p.id_b.as_str(), if p.same_class { "1" } else { "0" }])
                .map_err(|e| csv_error("pairs", e))?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(out)
}

/// One row of the outcomes CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeRow {
    pub outcome: RelabelOutcome,
    pub avg_score: f64,
}

pub fn write_outcomes(outcomes: &[RelabelOutcome], average_scores: &BTreeMap<String, f64>, seed: u64) -> CliResult<Vec<u8>> {
    let mut out = seed_comment(seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["id", "new_label", "vote_mean", "original_label", "agreed", "avg_score"])
            .map_err(|e| csv_error("outcomes", e))?;
        for o in outcomes {
            let avg = average_scores.get(&o.id).ok_or_else(|| relabel_core::Error::UnknownId(o.id.clone()))?;
            let agreed = o.agreed.map_or("", |a| if a { "true" } else { "false" });
            w.write_record([
                o.id.as_str(),
                &label_field(o.new_label),
                &o.vote_mean.to_string(),
                &label_field(o.original_label),
                agreed,
                &avg.to_string(),
            ])
            .map_err(|e| csv_error("outcomes", e))?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_outcomes<R: Read>(input: R, source: &str) -> CliResult<Vec<OutcomeRow>> {
    let mut reader = csv_reader(input);
    check_header(
        source,
        reader.headers().map_err(|e| csv_error(source, e))?,
        &["id", "new_label", "vote_mean", "original_label", "agreed", "avg_score"],
    )?;
    let number = |line: u64, field: &str, raw: &str| -> CliResult<f64> {
        raw.trim().parse::<f64>().map_err(|_| field_error(source, line, field, format!("`{raw}` is not a number")))
    };
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(source, e))?;
        let line = line_of(&row);
        let agreed = match row[4].trim() {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(field_error(source, line, "agreed", format!("`{other}` is not true, false or empty"))),
        };
        rows.push(OutcomeRow {
            outcome: RelabelOutcome {
                id: row[0].to_string(),
                new_label: parse_label(source, line, "new_label", &row[1])?,
                vote_mean: number(line, "vote_mean", &row[2])?,
                original_label: parse_label(source, line, "original_label", &row[3])?,
                agreed,
            },
            avg_score: number(line, "avg_score", &row[5])?,
        });
    }
    Ok(rows)
}

pub fn load_outcomes(path: &Path) -> CliResult<Vec<OutcomeRow>> {
    read_outcomes(read_text(path)?.as_bytes(), &path.display().to_string())
}

#[derive(Serialize)]
struct HistogramJson<'a> {
    seed: u64,
    bins: &'a RelabelHistogram,
}

/// Histogram JSON: `{seed, bins: {"1": {benign, malignant, discarded}, ...}}`.
pub fn write_histogram(histogram: &RelabelHistogram, seed: u64) -> CliResult<Vec<u8>> {
    to_json(&HistogramJson { seed, bins: histogram })
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    seed: u64,
    params: NetParams,
}

pub fn write_params(params: &NetParams, seed: u64) -> CliResult<Vec<u8>> {
    to_json(&ParamsJson { seed, params: params.clone() })
}

pub fn load_params(path: &Path) -> CliResult<NetParams> {
    let doc: ParamsJson =
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(doc.params)
}

/// Training log as JSON lines, one `{epoch, train_loss, val_loss, seed}` per epoch.
pub fn write_train_log(epochs: &[EpochRecord], seed: u64) -> CliResult<Vec<u8>> {
    #[derive(Serialize)]
    struct Line {
        epoch: usize,
        train_loss: f64,
        val_loss: Option<f64>,
        seed: u64,
    }
    let mut out = Vec::new();
    for e in epochs {
        let line = Line { epoch: e.epoch, train_loss: e.train_loss, val_loss: e.val_loss, seed };
        serde_json::to_writer(&mut out, &line).map_err(|e| CliError::data(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Files written by one command. On failure every file written so far is
/// removed, so a failed run leaves no partial outputs.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: impl Into<PathBuf>) -> CliResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Outputs { dir, written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn discard(&mut self) {
        for path in self.written.drain(..) {
            let _ = fs::remove_file(path);
        }
    }
}
