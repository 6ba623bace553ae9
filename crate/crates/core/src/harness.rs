//! CSV ingestion, experiment configuration, the baseline-plus-mitigations
//! grid over seeds and folds, aggregation, and table rendering.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{normalize_groups, split, Dataset, Example, Fold, SeedStream, SplitSpec, SplitUnit, Stratify};
use crate::error::{Error, Result};
use crate::inprocess::{apply_reweighing, reweigh_table, RegPenaltyConfig};
use crate::metrics::{
    band_check, fairness, grouped_confusion, performance, threshold, to_record, ExtendedRatio, FairnessReport,
    PerformanceReport, RecordValue, METRIC_KEYS,
};
use crate::model::{self, predict_proba, Architecture, LossSpec, ModelParams, TrainConfig, DEFAULT_HIDDEN};
use crate::postprocess::{roc_adjust, RocConfig, DEFAULT_TAU};
use crate::preprocess::{apply_massaging, massaging_plan, mixup_balance, MixupConfig, DEFAULT_MIXUP_ALPHA};
use crate::synth;

// ---------------------------------------------------------------- CSV

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsvOptions {
    pub delimiter: u8,
    /// Accept labels strictly between 0 and 1 (e.g. mixup output).
    pub soft_labels: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            soft_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadSummary {
    pub rows: usize,
    pub feature_dim: usize,
    pub group_names: [String; 2],
    /// `cells[label][group]`.
    pub cells: [[usize; 2]; 2],
}

impl LoadSummary {
    pub fn of(dataset: &Dataset) -> Self {
        LoadSummary {
            rows: dataset.len(),
            feature_dim: dataset.feature_dim,
            group_names: dataset.group_names.clone(),
            cells: dataset.cell_counts(),
        }
    }
}

impl fmt::Display for LoadSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} rows, {} features", self.rows, self.feature_dim)?;
        let [a, b] = &self.group_names;
        let w = a.len().max(b.len()).max(5);
        writeln!(f, "{:<8} {:>w$} {:>w$}", "", format!("{a}*"), b)?;
        writeln!(f, "{:<8} {:>w$} {:>w$}", "label=1", self.cells[1][0], self.cells[1][1])?;
        write!(f, "{:<8} {:>w$} {:>w$}", "label=0", self.cells[0][0], self.cells[0][1])
    }
}

const FIXED_COLUMNS: [&str; 3] = ["subject_id", "group", "label"];

fn csv_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Csv {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Parses `subject_id,group,label,f0,...,f{d-1}`. Rows are numbered from 1,
/// not counting the header.
pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| csv_err(0, "header", e.to_string()))?
        .clone();
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i).map(str::trim) != Some(*name) {
            return Err(csv_err(0, name, format!("missing column (expected at position {})", i + 1)));
        }
    }
    let feature_dim = header.len() - FIXED_COLUMNS.len();
    if feature_dim == 0 {
        return Err(csv_err(0, "f0", "missing column: no feature columns"));
    }
    for j in 0..feature_dim {
        let want = format!("f{j}");
        if header.get(3 + j).map(str::trim) != Some(want.as_str()) {
            return Err(csv_err(0, &want, "missing column"));
        }
    }

    let mut ids = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(row, "record", e.to_string()))?;
        if rec.len() != header.len() {
            return Err(csv_err(
                row,
                "record",
                format!("{} fields, header has {}", rec.len(), header.len()),
            ));
        }
        let label_text = rec[2].trim();
        let label: f64 = label_text
            .parse()
            .map_err(|_| csv_err(row, "label", format!("not a number: {label_text:?}")))?;
        let valid = if opts.soft_labels {
            (0.0..=1.0).contains(&label)
        } else {
            label == 0.0 || label == 1.0
        };
        if !valid {
            return Err(csv_err(row, "label", format!("label {label_text} is not in {{0, 1}}")));
        }
        let x = (0..feature_dim)
            .map(|j| {
                let t = rec[3 + j].trim();
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_err(row, &format!("f{j}"), format!("non-numeric feature {t:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let token = rec[1].trim().to_string();
        if !tokens.contains(&token) && {
            let mut distinct: Vec<&String> = tokens.iter().collect();
            distinct.sort();
            distinct.dedup();
            distinct.len() >= 2
        } {
            return Err(csv_err(row, "group", format!("unknown group token {token:?}; only two groups are supported")));
        }
        ids.push(rec[0].trim().to_string());
        tokens.push(token);
        labels.push(label);
        features.push(x);
    }
    if ids.is_empty() {
        return Err(Error::Empty("csv file has no data rows"));
    }
    let (groups, names) = normalize_groups(&tokens)?;
    let examples = ids
        .into_iter()
        .zip(groups)
        .zip(labels)
        .zip(features)
        .map(|(((id, g), y), x)| Example::new(x, y, g, id))
        .collect();
    Dataset::checked(examples, feature_dim, names)
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<(Dataset, LoadSummary)> {
    let file = std::fs::File::open(path)?;
    let ds = read_csv(std::io::BufReader::new(file), opts)?;
    let summary = LoadSummary::of(&ds);
    Ok((ds, summary))
}

/// Writes the loader's schema. Floats use the shortest representation that
/// parses back to the same value, so a write/read cycle is lossless.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..dataset.feature_dim).map(|j| format!("f{j}")));
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for e in &dataset.examples {
        let mut rec = vec![
            e.subject_id.clone(),
            dataset.group_names[e.group.index()].clone(),
            e.label.to_string(),
        ];
        rec.extend(e.features.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_csv(dataset, std::fs::File::create(path)?)
}

// ------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mitigation {
    None,
    Mixup { alpha: f64 },
    Massaging,
    Reweighing,
    Regularisation { lambda_eopp: f64, lambda_eodd: f64 },
    RegPlus { lambda_eopp: f64, lambda_eodd: f64, gamma: f64 },
    Roc { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Pre,
    In,
    Post,
}

impl Mitigation {
    fn stage(&self) -> Option<Stage> {
        match self {
            Mitigation::None => None,
            Mitigation::Mixup { .. } | Mitigation::Massaging => Some(Stage::Pre),
            Mitigation::Reweighing | Mitigation::Regularisation { .. } | Mitigation::RegPlus { .. } => Some(Stage::In),
            Mitigation::Roc { .. } => Some(Stage::Post),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Mitigation::Mixup { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::Config(format!("mixup alpha must be positive, got {alpha}")))
            }
            Mitigation::Regularisation {
                lambda_eopp,
                lambda_eodd,
            } => RegPenaltyConfig::original(lambda_eopp, lambda_eodd)
                .validate()
                .map_err(|e| Error::Config(e.to_string())),
            Mitigation::RegPlus {
                lambda_eopp,
                lambda_eodd,
                gamma,
            } => RegPenaltyConfig::plus(lambda_eopp, lambda_eodd, gamma)
                .validate()
                .map_err(|e| Error::Config(e.to_string())),
            Mitigation::Roc { tau } => RocConfig {
                tau,
                desirable_class: 1,
            }
            .validate()
            .map_err(|e| Error::Config(e.to_string())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Mitigation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Mitigation::None => f.write_str("none"),
            Mitigation::Mixup { alpha } => write!(f, "mixup({alpha})"),
            Mitigation::Massaging => f.write_str("massaging"),
            Mitigation::Reweighing => f.write_str("reweighing"),
            Mitigation::Regularisation {
                lambda_eopp,
                lambda_eodd,
            } => write!(f, "regularisation({lambda_eopp},{lambda_eodd})"),
            Mitigation::RegPlus {
                lambda_eopp,
                lambda_eodd,
                gamma,
            } => write!(f, "reg_plus({lambda_eopp},{lambda_eodd},{gamma})"),
            Mitigation::Roc { tau } => write!(f, "roc({tau})"),
        }
    }
}

impl FromStr for Mitigation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("unbalanced parentheses in {s:?}")))?;
                let args = inner
                    .split(',')
                    .map(|a| {
                        a.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad argument {a:?} in {s:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                (s[..i].trim(), args)
            }
            None => (s, Vec::new()),
        };
        let arity = |n: usize| -> Result<()> {
            if args.len() == n || args.is_empty() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} takes {n} argument(s), got {}", args.len())))
            }
        };
        let arg = |i: usize, default: f64| args.get(i).copied().unwrap_or(default);
        let m = match name {
            "none" | "base" => {
                arity(0)?;
                Mitigation::None
            }
            "mixup" => {
                arity(1)?;
                Mitigation::Mixup {
                    alpha: arg(0, DEFAULT_MIXUP_ALPHA),
                }
            }
            "massaging" => {
                arity(0)?;
                Mitigation::Massaging
            }
            "reweighing" => {
                arity(0)?;
                Mitigation::Reweighing
            }
            "regularisation" | "regularization" => {
                arity(2)?;
                Mitigation::Regularisation {
                    lambda_eopp: arg(0, 2.0),
                    lambda_eodd: arg(1, 2.0),
                }
            }
            "reg_plus" => {
                arity(3)?;
                Mitigation::RegPlus {
                    lambda_eopp: arg(0, 2.0),
                    lambda_eodd: arg(1, 2.0),
                    gamma: arg(2, 20.0),
                }
            }
            "roc" => {
                arity(1)?;
                Mitigation::Roc {
                    tau: arg(0, DEFAULT_TAU),
                }
            }
            other => return Err(Error::Config(format!("unknown mitigation {other:?}"))),
        };
        m.validate()?;
        Ok(m)
    }
}

/// One table column: a single mitigation, or several joined with `+` when
/// stacking is enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationSpec(pub Vec<Mitigation>);

impl MitigationSpec {
    pub fn single(m: Mitigation) -> Self {
        MitigationSpec(vec![m])
    }

    pub fn is_baseline(&self) -> bool {
        self.0.iter().all(|m| *m == Mitigation::None)
    }

    fn validate(&self, stack: bool) -> Result<()> {
        if self.0.len() > 1 && !stack {
            return Err(Error::Config(format!("{self} combines mitigations; enable stacking to allow it")));
        }
        let stages: Vec<Stage> = self.0.iter().filter_map(Mitigation::stage).collect();
        if stages.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("{self}: list pre-, in- and post-processing steps in that order")));
        }
        for s in [Stage::In, Stage::Post] {
            if stages.iter().filter(|&&t| t == s).count() > 1 {
                return Err(Error::Config(format!("{self}: at most one {s:?}-processing step per column")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for MitigationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(Mitigation::to_string).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for MitigationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // '+' never appears inside argument lists, so a plain split is safe.
        let parts = s
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<Mitigation>>>()?;
        Ok(MitigationSpec(parts))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Csv(PathBuf),
    Synth { preset: String, bias_gap: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Logistic,
    Mlp { width: usize },
}

impl ModelKind {
    pub fn architecture(&self, dim: usize) -> Architecture {
        match *self {
            ModelKind::Logistic => Architecture::Logistic { dim },
            ModelKind::Mlp { width } => Architecture::Mlp { dim, hidden: width },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Evaluation {
    KFold { k: usize },
    Holdout { train_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format {other:?} (markdown, csv, json)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelKind,
    /// Optimiser settings shared by every training run; the seed and loss
    /// are replaced per cell and per mitigation.
    pub train: TrainConfig,
    /// Stage-two epochs of the regularised fine-tune.
    pub fine_tune_epochs: usize,
    pub evaluation: Evaluation,
    pub split_unit: SplitUnit,
    pub mitigations: Vec<MitigationSpec>,
    pub stack: bool,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            data: DataSource::Synth {
                preset: "biased".into(),
                bias_gap: 1.5,
                seed: 0,
            },
            model: ModelKind::Logistic,
            fine_tune_epochs: train.epochs / 2,
            train,
            evaluation: Evaluation::KFold { k: 5 },
            split_unit: SplitUnit::Example,
            mitigations: vec![MitigationSpec::single(Mitigation::None)],
            stack: false,
            seeds: vec![1],
            output: None,
            format: Format::Markdown,
        }
    }
}

/// Flat key-value form of [`ExperimentConfig`]; every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub data: Option<String>,
    pub csv_path: Option<PathBuf>,
    pub preset: Option<String>,
    pub bias_gap: Option<f64>,
    pub data_seed: Option<u64>,
    pub model: Option<String>,
    pub hidden: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub l2_strength: Option<f64>,
    pub fine_tune_epochs: Option<usize>,
    pub evaluation: Option<String>,
    pub folds: Option<usize>,
    pub train_fraction: Option<f64>,
    pub split_unit: Option<String>,
    pub mitigations: Option<Vec<String>>,
    pub stack: Option<bool>,
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
    pub format: Option<String>,
}

impl RawConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fields set in `other` win.
    pub fn overlay(self, other: RawConfig) -> RawConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RawConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            data, csv_path, preset, bias_gap, data_seed, model, hidden, learning_rate, batch_size, epochs,
            l2_strength, fine_tune_epochs, evaluation, folds, train_fraction, split_unit, mitigations, stack,
            seeds, output, format
        )
    }

    pub fn resolve(self) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        let data = match self.data.as_deref() {
            Some("csv") => DataSource::Csv(
                self.csv_path
                    .ok_or_else(|| Error::Config("data = \"csv\" needs csv_path".into()))?,
            ),
            None if self.csv_path.is_some() => DataSource::Csv(self.csv_path.unwrap()),
            None | Some("synth") => DataSource::Synth {
                preset: self.preset.unwrap_or_else(|| "biased".into()),
                bias_gap: self.bias_gap.unwrap_or(1.5),
                seed: self.data_seed.unwrap_or(0),
            },
            Some(other) => return Err(Error::Config(format!("data must be csv or synth, got {other:?}"))),
        };
        let model = match self.model.as_deref() {
            None | Some("logistic") => ModelKind::Logistic,
            Some("mlp") => ModelKind::Mlp {
                width: self.hidden.unwrap_or(DEFAULT_HIDDEN),
            },
            Some(other) => return Err(Error::Config(format!("model must be logistic or mlp, got {other:?}"))),
        };
        let train = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.train.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.train.batch_size),
            epochs: self.epochs.unwrap_or(d.train.epochs),
            l2_strength: self.l2_strength.unwrap_or(d.train.l2_strength),
            ..d.train
        };
        let evaluation = match self.evaluation.as_deref() {
            None | Some("kfold") => Evaluation::KFold {
                k: self.folds.unwrap_or(5),
            },
            Some("holdout") => Evaluation::Holdout {
                train_fraction: self.train_fraction.unwrap_or(0.8),
            },
            Some(other) => return Err(Error::Config(format!("evaluation must be kfold or holdout, got {other:?}"))),
        };
        let split_unit = match self.split_unit.as_deref() {
            None | Some("example") => SplitUnit::Example,
            Some("subject") => SplitUnit::Subject,
            Some(other) => return Err(Error::Config(format!("split_unit must be example or subject, got {other:?}"))),
        };
        let mitigations = match self.mitigations {
            Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
            None => d.mitigations,
        };
        let cfg = ExperimentConfig {
            data,
            model,
            fine_tune_epochs: self.fine_tune_epochs.unwrap_or(train.epochs / 2),
            train,
            evaluation,
            split_unit,
            mitigations,
            stack: self.stack.unwrap_or(false),
            seeds: self.seeds.unwrap_or(d.seeds),
            output: self.output,
            format: self.format.as_deref().map(str::parse).transpose()?.unwrap_or(d.format),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        RawConfig::from_toml(text)?.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.mitigations.is_empty() {
            return Err(Error::Config("at least one mitigation column is required".into()));
        }
        for m in &self.mitigations {
            m.validate(self.stack)?;
            for step in &m.0 {
                step.validate()?;
            }
        }
        match self.evaluation {
            Evaluation::KFold { k } if k < 2 => return Err(Error::Config("kfold needs at least 2 folds".into())),
            Evaluation::Holdout { train_fraction } if !(train_fraction > 0.0 && train_fraction < 1.0) => {
                return Err(Error::Config("train_fraction must lie in (0, 1)".into()))
            }
            _ => {}
        }
        if let ModelKind::Mlp { width: 0 } = self.model {
            return Err(Error::Config("mlp width must be positive".into()));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Csv(path) => Ok(load_csv(path, &CsvOptions::default())?.0),
            DataSource::Synth { preset, bias_gap, seed } => synth::generate(&synth::preset(preset, *seed, *bias_gap)?),
        }
    }

    fn split_spec(&self, seed: u64) -> SplitSpec {
        let split_seed = SeedStream::new(seed).derive("split", 0);
        let mut spec = match self.evaluation {
            Evaluation::KFold { k } => SplitSpec::kfold(k, split_seed),
            Evaluation::Holdout { train_fraction } => SplitSpec::holdout(train_fraction, split_seed),
        };
        spec.unit = self.split_unit;
        if self.split_unit == SplitUnit::Subject {
            spec.stratify_on = Stratify::LabelGroup;
        }
        spec
    }
}

// ---------------------------------------------------------- experiment

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEntry {
    pub seed: u64,
    pub fold: usize,
    pub mitigation: String,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug)]
struct Evaluated {
    perf: PerformanceReport,
    fair: FairnessReport,
}

fn evaluate_predictions(fold: &Dataset, predictions: &[u8]) -> Result<Evaluated> {
    let gc = grouped_confusion(&fold.hard_labels(), predictions, &fold.groups())?;
    Ok(Evaluated {
        perf: performance(&gc.combined),
        fair: fairness(&gc)?,
    })
}

/// Performance and fairness of a saved model on a labelled dataset.
pub fn evaluate_model(params: &ModelParams, dataset: &Dataset) -> Result<(PerformanceReport, FairnessReport)> {
    let probs = predict_proba(params, dataset)?;
    let e = evaluate_predictions(dataset, &threshold(&probs))?;
    Ok((e.perf, e.fair))
}

struct CellOutput {
    evaluations: Vec<Evaluated>,
    train_calls: Vec<usize>,
    audit: Vec<AuditEntry>,
}

struct CellContext<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    fold_index: usize,
    fold: &'a Fold,
    arch: Architecture,
    train_cfg: TrainConfig,
    baseline: ModelParams,
    baseline_test_probs: Vec<f64>,
}

impl CellContext<'_> {
    fn tag(&self, mitigation: &str, e: Error) -> Error {
        Error::Experiment {
            seed: self.seed,
            fold: self.fold_index,
            mitigation: mitigation.to_string(),
            source: Box::new(e),
        }
    }

    fn run(&self, spec: &MitigationSpec, audit: &mut Vec<AuditEntry>) -> Result<(Evaluated, usize)> {
        let label = spec.to_string();
        let cell_seeds = SeedStream::new(self.train_cfg.seed);
        let mut train_set = self.fold.train.clone();
        let mut loss = LossSpec::Plain;
        let mut fine_tune: Option<RegPenaltyConfig> = None;
        let mut roc: Option<RocConfig> = None;
        let mut note = |detail: serde_json::Value| {
            audit.push(AuditEntry {
                seed: self.seed,
                fold: self.fold_index,
                mitigation: label.clone(),
                detail,
            })
        };
        let mut calls = 0;

        for step in &spec.0 {
            match *step {
                Mitigation::None => {}
                Mitigation::Mixup { alpha } => {
                    let out = mixup_balance(&train_set, &MixupConfig { alpha }, cell_seeds.derive("mixup", 0))?;
                    note(json!({"step": "mixup", "alpha": alpha, "synthetic": out.lambdas.len()}));
                    train_set = out.dataset;
                }
                Mitigation::Massaging => {
                    // The ranking model only ever sees the training split.
                    let ranker = if train_set.digest() == self.fold.train.digest() {
                        self.baseline.clone()
                    } else {
                        calls += 1;
                        model::train(&train_set, self.arch, &self.train_cfg)?.params
                    };
                    let probs = predict_proba(&ranker, &train_set)?;
                    let plan = massaging_plan(&train_set, &probs)?;
                    note(json!({"step": "massaging", "plan": plan.audit_json(&train_set.group_names)}));
                    train_set = apply_massaging(&train_set, &plan)?;
                }
                Mitigation::Reweighing => {
                    let table = reweigh_table(&train_set)?;
                    note(json!({"step": "reweighing", "weights": table.audit_json(&train_set.group_names)}));
                    train_set = apply_reweighing(&train_set, &table);
                    loss = LossSpec::Weighted;
                }
                Mitigation::Regularisation {
                    lambda_eopp,
                    lambda_eodd,
                } => fine_tune = Some(RegPenaltyConfig::original(lambda_eopp, lambda_eodd)),
                Mitigation::RegPlus {
                    lambda_eopp,
                    lambda_eodd,
                    gamma,
                } => fine_tune = Some(RegPenaltyConfig::plus(lambda_eopp, lambda_eodd, gamma)),
                Mitigation::Roc { tau } => {
                    roc = Some(RocConfig {
                        tau,
                        desirable_class: 1,
                    })
                }
            }
        }

        let retrain = loss != LossSpec::Plain || train_set.digest() != self.fold.train.digest();
        let mut params = if retrain {
            calls += 1;
            model::train(&train_set, self.arch, &TrainConfig { loss, ..self.train_cfg })?.params
        } else {
            self.baseline.clone()
        };
        if let Some(reg) = fine_tune {
            calls += 1;
            let stage2 = TrainConfig {
                epochs: self.cfg.fine_tune_epochs,
                seed: cell_seeds.derive("fine_tune", 0),
                loss: LossSpec::Regularised(reg),
                ..self.train_cfg
            };
            params = model::fine_tune(&params, &train_set, &stage2)?.params;
        }

        let probs = if calls == 0 {
            self.baseline_test_probs.clone()
        } else {
            predict_proba(&params, &self.fold.test)?
        };
        let predictions = match roc {
            Some(r) => roc_adjust(&probs, &self.fold.test.groups(), &r)?,
            None => threshold(&probs),
        };
        Ok((evaluate_predictions(&self.fold.test, &predictions)?, calls))
    }
}

fn run_cell(cfg: &ExperimentConfig, seed: u64, fold_index: usize, fold: &Fold) -> Result<CellOutput> {
    let arch = cfg.model.architecture(fold.train.feature_dim);
    let train_cfg = TrainConfig {
        seed: SeedStream::new(seed).derive("train", fold_index as u64),
        loss: LossSpec::Plain,
        ..cfg.train
    };
    let tag = |m: &str, e: Error| Error::Experiment {
        seed,
        fold: fold_index,
        mitigation: m.to_string(),
        source: Box::new(e),
    };
    let test_digest = fold.test.digest();
    let baseline = model::train(&fold.train, arch, &train_cfg).map_err(|e| tag("none", e))?.params;
    let baseline_test_probs = predict_proba(&baseline, &fold.test).map_err(|e| tag("none", e))?;
    let ctx = CellContext {
        cfg,
        seed,
        fold_index,
        fold,
        arch,
        train_cfg,
        baseline,
        baseline_test_probs,
    };
    let base_eval = evaluate_predictions(&fold.test, &threshold(&ctx.baseline_test_probs)).map_err(|e| tag("none", e))?;

    let mut out = CellOutput {
        evaluations: vec![base_eval.clone()],
        train_calls: vec![1],
        audit: Vec::new(),
    };
    for (i, spec) in cfg.mitigations.iter().enumerate() {
        if i == 0 && spec.is_baseline() {
            continue;
        }
        let label = spec.to_string();
        let (eval, calls) = ctx.run(spec, &mut out.audit).map_err(|e| ctx.tag(&label, e))?;
        if fold.test.digest() != test_digest {
            return Err(ctx.tag(&label, Error::invalid("test fold changed during mitigation")));
        }
        out.evaluations.push(eval);
        out.train_calls.push(calls);
    }
    Ok(out)
}

/// Runs the baseline and every configured mitigation on each (seed, fold)
/// cell. Cells run in parallel; results are reduced in coordinate order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    let data = cfg.load_data()?;
    run_experiment_on(cfg, &data)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<ResultsTable> {
    cfg.validate()?;
    let mut coords = Vec::new();
    for &seed in &cfg.seeds {
        let folds = split(data, &cfg.split_spec(seed)).map_err(|e| Error::Experiment {
            seed,
            fold: 0,
            mitigation: "split".into(),
            source: Box::new(e),
        })?;
        coords.extend(folds.into_iter().enumerate().map(|(i, f)| (seed, i, f)));
    }
    let outputs: Vec<Result<CellOutput>> = coords
        .par_iter()
        .map(|(seed, i, fold)| run_cell(cfg, *seed, *i, fold))
        .collect();

    let labels = column_labels(&cfg.mitigations);
    let mut per_column: Vec<Vec<Evaluated>> = vec![Vec::new(); labels.len()];
    let mut train_calls = vec![0usize; labels.len()];
    let mut audit = Vec::new();
    for out in outputs {
        let out = out?;
        for (c, (e, n)) in out.evaluations.into_iter().zip(out.train_calls).enumerate() {
            per_column[c].push(e);
            train_calls[c] += n;
        }
        audit.extend(out.audit);
    }
    let columns = labels
        .into_iter()
        .zip(per_column)
        .map(|(label, evals)| Column {
            label,
            cells: aggregate(&evals),
        })
        .collect();
    Ok(ResultsTable {
        columns,
        repetitions: coords.len(),
        train_calls,
        audit,
    })
}

fn column_labels(specs: &[MitigationSpec]) -> Vec<String> {
    let mut labels = vec!["Base".to_string()];
    for (i, spec) in specs.iter().enumerate() {
        if i == 0 && spec.is_baseline() {
            continue;
        }
        let base = spec.to_string();
        let mut label = base.clone();
        let mut n = 2;
        while labels.contains(&label) {
            label = format!("{base} #{n}");
            n += 1;
        }
        labels.push(label);
    }
    labels
}

// ------------------------------------------------------------- results

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellValue {
    Number { mean: f64, std: Option<f64> },
    Infinite,
    Equal,
    Undefined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub value: CellValue,
    /// Fairness rows only: the aggregate lies outside [0.8, 1.2].
    pub out_of_band: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Column {
    pub label: String,
    /// Indexed like [`METRIC_KEYS`].
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultsTable {
    pub columns: Vec<Column>,
    /// Number of (seed, fold) evaluations behind every cell.
    pub repetitions: usize,
    /// Models trained for each column beyond what it reused.
    pub train_calls: Vec<usize>,
    pub audit: Vec<AuditEntry>,
}

impl ResultsTable {
    pub fn cell(&self, column: &str, metric: &str) -> Option<&Cell> {
        let m = METRIC_KEYS.iter().position(|k| *k == metric)?;
        self.columns.iter().find(|c| c.label == column).map(|c| &c.cells[m])
    }
}

fn is_fairness_key(key: &str) -> bool {
    key.starts_with("m_")
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    (mean, std)
}

fn aggregate(evals: &[Evaluated]) -> Vec<Cell> {
    let records: Vec<Vec<(&'static str, RecordValue)>> = evals.iter().map(|e| to_record(&e.perf, &e.fair)).collect();
    METRIC_KEYS
        .iter()
        .enumerate()
        .map(|(m, key)| {
            let values: Vec<RecordValue> = records.iter().map(|r| r[m].1).collect();
            let value = if values.contains(&RecordValue::Infinite) {
                CellValue::Infinite
            } else if !values.is_empty() && values.iter().all(|v| *v == RecordValue::Equal) {
                CellValue::Equal
            } else {
                // zero-over-zero ratios count as perfectly balanced (1.0)
                let nums: Vec<f64> = values
                    .iter()
                    .filter_map(|v| match v {
                        RecordValue::Number(x) => Some(*x),
                        RecordValue::Equal => Some(1.0),
                        _ => None,
                    })
                    .collect();
                if nums.is_empty() {
                    CellValue::Undefined
                } else {
                    let (mean, std) = mean_std(&nums);
                    CellValue::Number { mean, std }
                }
            };
            let out_of_band = is_fairness_key(key)
                && match value {
                    CellValue::Number { mean, .. } => !band_check(&ExtendedRatio::Finite(mean)),
                    CellValue::Infinite => true,
                    _ => false,
                };
            Cell { value, out_of_band }
        })
        .collect()
}

/// Shared cell text: four decimals, `inf`, `equal`, `n/a`, and a trailing
/// `!` on fairness cells outside the band.
pub fn cell_text(cell: &Cell) -> String {
    let body = match cell.value {
        CellValue::Number { mean, std: Some(s) } => format!("{mean:.4} ± {s:.4}"),
        CellValue::Number { mean, std: None } => format!("{mean:.4}"),
        CellValue::Infinite => "inf".to_string(),
        CellValue::Equal => "equal".to_string(),
        CellValue::Undefined => "n/a".to_string(),
    };
    if cell.out_of_band {
        body + "!"
    } else {
        body
    }
}

pub fn render_table(results: &ResultsTable, format: Format) -> String {
    match format {
        Format::Markdown => render_markdown(results),
        Format::Csv => render_csv(results),
        Format::Json => render_json(results),
    }
}

fn render_markdown(results: &ResultsTable) -> String {
    let mut out = String::from("| metric |");
    for c in &results.columns {
        out += &format!(" {} |", c.label);
    }
    out += "\n|---|";
    out += &"---|".repeat(results.columns.len());
    out.push('\n');
    for (m, key) in METRIC_KEYS.iter().enumerate() {
        out += &format!("| {key} |");
        for c in &results.columns {
            out += &format!(" {} |", cell_text(&c.cells[m]));
        }
        out.push('\n');
    }
    out
}

fn render_csv(results: &ResultsTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string()];
    header.extend(results.columns.iter().map(|c| c.label.clone()));
    // Writing to a Vec cannot fail.
    w.write_record(&header).expect("in-memory csv");
    for (m, key) in METRIC_KEYS.iter().enumerate() {
        let mut row = vec![key.to_string()];
        row.extend(results.columns.iter().map(|c| cell_text(&c.cells[m])));
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}

fn render_json(results: &ResultsTable) -> String {
    let rows: Vec<serde_json::Value> = METRIC_KEYS
        .iter()
        .enumerate()
        .map(|(m, key)| {
            let cells: Vec<serde_json::Value> = results
                .columns
                .iter()
                .map(|c| {
                    let cell = &c.cells[m];
                    let mut v = serde_json::to_value(cell.value).expect("cell values serialize");
                    v["text"] = json!(cell_text(cell));
                    v["out_of_band"] = json!(cell.out_of_band);
                    v
                })
                .collect();
            json!({"metric": key, "cells": cells})
        })
        .collect();
    let doc = json!({
        "columns": results.columns.iter().map(|c| &c.label).collect::<Vec<_>>(),
        "repetitions": results.repetitions,
        "rows": rows,
    });
    serde_json::to_string_pretty(&doc).expect("json values serialize") + "\n"
}
