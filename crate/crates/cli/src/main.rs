use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use depfair::harness::{self, CsvOptions, ExperimentConfig, Format, LoadSummary, RawConfig};
use depfair::metrics::record_json;
use depfair::model::{self, ModelParams, TrainConfig};

#[derive(Parser)]
#[command(name = "depfair", version, about = "Group-fairness evaluation and bias mitigation for binary classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed (repeat for several seeds where a list is accepted)
    #[arg(long)]
    seed: Vec<u64>,
    /// Write output here instead of standard output
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// markdown, csv or json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// CSV dataset (subject_id,group,label,f0..)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic preset: mumtaz-like, modma-like, rest-like or biased
    #[arg(long)]
    preset: Option<String>,
    /// Minority separation deficit for the biased preset
    #[arg(long)]
    bias_gap: Option<f64>,
    /// Seed of the synthetic generator
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the baseline and mitigation grid and print the results table
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Mitigation column, e.g. reweighing or reg_plus(2,2,20); repeatable
        #[arg(long = "mitigation")]
        mitigations: Vec<String>,
        /// Allow columns that combine mitigations with '+'
        #[arg(long)]
        stack: bool,
        /// logistic or mlp
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        /// Write the per-fold mitigation audit log as JSON
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Train a plain model on a dataset and save its parameters as JSON
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Score a saved model on a CSV dataset and report performance and fairness
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model JSON written by `train`
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn read_config(common: &Common) -> Result<RawConfig> {
    match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(RawConfig::from_toml(&text)?)
        }
        None => Ok(RawConfig::default()),
    }
}

fn flags_config(common: &Common, data: &DataArgs) -> RawConfig {
    RawConfig {
        data: data.data.as_ref().map(|_| "csv".to_string()).or(data.preset.as_ref().map(|_| "synth".to_string())),
        csv_path: data.data.clone(),
        preset: data.preset.clone(),
        bias_gap: data.bias_gap,
        data_seed: data.data_seed,
        seeds: (!common.seed.is_empty()).then(|| common.seed.clone()),
        output: common.output.clone(),
        format: common.format.clone(),
        ..RawConfig::default()
    }
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn generate(common: Common, data: DataArgs) -> Result<()> {
    let mut raw = read_config(&common)?.overlay(flags_config(&common, &data));
    if raw.data_seed.is_none() {
        raw.data_seed = common.seed.first().copied();
    }
    let cfg = raw.resolve()?;
    let ds = match &cfg.data {
        harness::DataSource::Synth { .. } => cfg.load_data()?,
        harness::DataSource::Csv(_) => bail!("generate needs a synthetic preset, not a CSV source"),
    };
    eprintln!("{}", LoadSummary::of(&ds));
    match &cfg.output {
        Some(path) => harness::save_csv(&ds, path)?,
        None => harness::write_csv(&ds, std::io::stdout().lock())?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    common: Common,
    data: DataArgs,
    mitigations: Vec<String>,
    stack: bool,
    model: Option<String>,
    epochs: Option<usize>,
    folds: Option<usize>,
    audit: Option<PathBuf>,
) -> Result<()> {
    let flags = RawConfig {
        mitigations: (!mitigations.is_empty()).then_some(mitigations),
        stack: stack.then_some(true),
        model,
        epochs,
        folds,
        ..flags_config(&common, &data)
    };
    let cfg: ExperimentConfig = read_config(&common)?.overlay(flags).resolve()?;
    let results = harness::run_experiment(&cfg)?;
    emit(&harness::render_table(&results, cfg.format), cfg.output.as_deref())?;
    if let Some(path) = audit {
        let text = serde_json::to_string_pretty(&results.audit)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn train(
    common: Common,
    data: DataArgs,
    model_kind: Option<String>,
    hidden: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<()> {
    let flags = RawConfig {
        model: model_kind,
        hidden,
        epochs,
        learning_rate,
        ..flags_config(&common, &data)
    };
    let cfg = read_config(&common)?.overlay(flags).resolve()?;
    let ds = cfg.load_data()?;
    let tc = TrainConfig {
        seed: cfg.seeds[0],
        ..cfg.train
    };
    let outcome = model::train(&ds, cfg.model.architecture(ds.feature_dim), &tc)?;
    if let Some(last) = outcome.loss_history.last() {
        eprintln!("trained on {} examples, final loss {last:.4}", ds.len());
    }
    emit(&(outcome.params.to_json()? + "\n"), cfg.output.as_deref())
}

fn evaluate(common: Common, model_path: PathBuf, data: PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let params = ModelParams::from_json(&text)?;
    let (ds, summary) = harness::load_csv(&data, &CsvOptions::default())?;
    eprintln!("{summary}");
    let (perf, fair) = harness::evaluate_model(&params, &ds)?;
    let format: Format = common.format.as_deref().unwrap_or("json").parse()?;
    let record = record_json(&perf, &fair);
    let body = match format {
        Format::Json => {
            let doc = serde_json::json!({
                "metrics": record,
                "fairness_flags": {
                    "sp": fair.sp_fair,
                    "eopp": fair.eopp_fair,
                    "eodd": fair.eodd_fair,
                    "eacc": fair.eacc_fair,
                    "eodds": fair.eodds_fair,
                },
            });
            serde_json::to_string_pretty(&doc)? + "\n"
        }
        Format::Markdown | Format::Csv => {
            let md = format == Format::Markdown;
            let mut out = if md { "| metric | value |\n|---|---|\n".to_string() } else { "metric,value\n".to_string() };
            for (k, v) in depfair::metrics::to_record(&perf, &fair) {
                let text = match v.to_json() {
                    serde_json::Value::Number(n) => format!("{:.4}", n.as_f64().unwrap_or(f64::NAN)),
                    serde_json::Value::String(s) => s,
                    _ => "n/a".into(),
                };
                out += &if md { format!("| {k} | {text} |\n") } else { format!("{k},{text}\n") };
            }
            out
        }
    };
    emit(&body, common.output.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, data } => generate(common, data),
        Command::Run {
            common,
            data,
            mitigations,
            stack,
            model,
            epochs,
            folds,
            audit,
        } => run(common, data, mitigations, stack, model, epochs, folds, audit),
        Command::Train {
            common,
            data,
            model,
            hidden,
            epochs,
            learning_rate,
        } => train(common, data, model, hidden, epochs, learning_rate),
        Command::Evaluate { common, model, data } => evaluate(common, model, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
