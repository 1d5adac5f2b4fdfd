//! Command-line front end: calibrate, prune, apply, report and toybench.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::budgeting::BudgetPolicy;
use crate::calibration::{read_stats, write_stats};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, read_mask, sparsity_report, write_mask, SparsityReport};
use crate::modelspec::{load_model_spec, ModelSpecConfig, PrunableModel};
use crate::pipeline::{prune, PruneRequest};
use crate::scoring::Criterion;
use crate::tensorstore::{read_container, write_container, TensorData};
use crate::toybench::experiment::{
    calibrate_toy, run_experiment_to_dir, ExperimentConfig, ToyMethod,
};
use crate::toybench::{PairSetConfig, SyntheticPairSet, ToyVlm};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "multiflow",
    version,
    about = "Gradient-free information-flow pruning",
    args_override_self = true
)]
pub struct Cli {
    /// JSON object whose keys override the matching flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accumulate input-activation norms with the toy forward engine.
    Calibrate(CalibrateArgs),
    /// Score, budget and mask a checkpoint.
    Prune(PruneArgs),
    /// Zero the masked weights of a checkpoint.
    Apply(ApplyArgs),
    /// Combine the layer sparsities of several masks into one table.
    Report(ReportArgs),
    /// Run the prune-then-finetune grid on the toy model.
    Toybench(ToybenchArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub model_spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batches: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Seed of the synthetic calibration pairs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_sparsity(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("sparsity {v} outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub model_spec: PathBuf,
    /// Activation statistics; required by multiflow and multiflow_nodes_only.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value = "multiflow")]
    pub criterion: Criterion,
    #[arg(long, default_value = "multimodal_magnitude")]
    pub policy: BudgetPolicy,
    /// Fraction of weights removed.
    #[arg(long, value_parser = parse_sparsity)]
    pub sparsity: f64,
    /// Keep the lowest-scoring weights instead of the highest.
    #[arg(long)]
    pub invert: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Series name used by `report`.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the mask path with a `.report.json` extension.
    #[arg(long)]
    pub report_json: Option<PathBuf>,
    /// Defaults to the mask path with a `.report.csv` extension.
    #[arg(long)]
    pub report_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub masks: Vec<PathBuf>,
    /// Topology to report against when the masks do not embed one.
    #[arg(long)]
    pub model_spec: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: PathBuf,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToybenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "dense,multiflow,random,multiflow_inverted"
    )]
    pub methods: Vec<ToyMethod>,
    #[arg(long, value_delimiter = ',', value_parser = parse_sparsity, default_value = "0.75")]
    pub sparsities: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Fine-tuning steps after pruning.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2000)]
    pub pretrain_steps: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Turns a JSON config object into extra `--key value` arguments.
fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(Error::Format(format!(
            "config {} is not a JSON object",
            path.display()
        )));
    };
    let scalar = |key: &str, v: &Value| -> Result<String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            other => Err(Error::InvalidArgument(format!(
                "config key '{key}': unsupported value {other}"
            ))),
        }
    };
    let mut args = Vec::new();
    for (key, v) in &map {
        if key == "config" {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => args.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(|i| scalar(key, i))
                    .collect::<Result<Vec<_>>>()?;
                args.push(flag.into());
                args.push(parts.join(",").into());
            }
            other => {
                args.push(flag.into());
                args.push(scalar(key, other)?.into());
            }
        }
    }
    Ok(args)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let arg = arg.to_string_lossy();
        if arg == "--" {
            break;
        }
        if arg == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn exit_code(e: &Error) -> i32 {
    if e.is_io_or_format() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    // The config is read before parsing so it can supply required flags.
    if let Some(path) = config_path(&argv) {
        match config_args(&path) {
            Ok(extra) => argv.extend(extra),
            Err(e) => {
                eprintln!("error: {e}");
                return exit_code(&e);
            }
        }
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Prune(a) => cmd_prune(&a),
        Command::Apply(a) => cmd_apply(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Toybench(a) => cmd_toybench(&a),
    }
}

fn load_model(
    spec_path: &Path,
    checkpoint: &crate::tensorstore::TensorMap,
) -> Result<PrunableModel> {
    let config = ModelSpecConfig::from_file(spec_path)?;
    load_model_spec(&config, checkpoint)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<i32> {
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let checkpoint = crate::tensorstore::decode_container(&bytes)?;
    let model = load_model(&a.model_spec, &checkpoint)?;
    let toy_config = ToyVlm::config_from_checkpoint(&checkpoint)?;
    let toy = ToyVlm::from_checkpoint(toy_config, &checkpoint)?;
    let data = SyntheticPairSet::new(
        a.seed,
        PairSetConfig {
            d_in: toy_config.d_in,
            ..PairSetConfig::default()
        },
    );
    let mut acc = calibrate_toy(&toy, &model, &data, a.batches, a.batch_size)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.update(format!(
        "seed={};batches={};batch_size={}",
        a.seed, a.batches, a.batch_size
    ));
    acc.set_source_digest(hex::encode(hasher.finalize()));
    let stats = acc.finalize()?;
    write_stats(&stats, &a.out)?;
    println!("token_count {}", stats.token_count);
    Ok(EXIT_OK)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn cmd_prune(a: &PruneArgs) -> Result<i32> {
    let checkpoint = read_container(&a.checkpoint)?;
    let model = load_model(&a.model_spec, &checkpoint)?;
    let stats = a.stats.as_deref().map(read_stats).transpose()?;
    let mut req = PruneRequest::new(a.criterion, a.policy, a.sparsity);
    req.invert = a.invert;
    req.seed = a.seed;
    req.label = a.label.clone();
    let outcome = prune(&model, &checkpoint, stats.as_ref(), &req)?;
    drop(checkpoint);
    write_mask(&outcome.mask, &a.out)?;
    let json_path = a
        .report_json
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".report.json"));
    let csv_path = a
        .report_csv
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".report.csv"));
    write_text(&json_path, &outcome.report.to_json())?;
    write_text(&csv_path, &outcome.report.to_csv()?)?;
    println!(
        "kept {} of {} ({} global sparsity {:.6})",
        outcome.mask.total_kept(),
        model.global_param_count,
        outcome.report.series,
        outcome.report.global_sparsity
    );
    if outcome.violations.is_empty() {
        Ok(EXIT_OK)
    } else {
        for v in &outcome.violations {
            eprintln!("violation: {v}");
        }
        Ok(EXIT_INVALID)
    }
}

pub fn cmd_apply(a: &ApplyArgs) -> Result<i32> {
    let mask = read_mask(&a.mask)?;
    let checkpoint = read_container(&a.checkpoint)?;
    let pruned = apply_mask(&checkpoint, &mask)?;
    drop(checkpoint);
    let (mut nonzero, mut total) = (0usize, 0usize);
    for name in mask.layers.keys() {
        if let Some(TensorData::F32(v)) = pruned.get(name).map(|t| t.data()) {
            nonzero += v.iter().filter(|x| **x != 0.0).count();
            total += v.len();
        }
    }
    write_container(&pruned, &a.out)?;
    println!(
        "nonzero {nonzero} of {total} masked-layer weights (mask keeps {})",
        mask.total_kept()
    );
    Ok(EXIT_OK)
}

/// Rows of the combined per-layer report, one series per mask.
pub fn combined_report_csv(reports: &[SparsityReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "method",
        "modality",
        "depth_index",
        "layer",
        "size",
        "kept",
        "sparsity",
    ])
    .map_err(fail)?;
    for r in reports {
        for l in &r.layers {
            w.write_record([
                r.series.clone(),
                l.modality.clone(),
                l.depth_index.to_string(),
                l.layer.clone(),
                l.size.to_string(),
                l.kept.to_string(),
                l.sparsity.to_string(),
            ])
            .map_err(fail)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let mut seen = BTreeSet::new();
    let mut paths = Vec::new();
    for p in &a.masks {
        let key = std::fs::canonicalize(p).unwrap_or_else(|_| p.clone());
        if seen.insert(key) {
            paths.push(p);
        } else {
            log::warn!("duplicate mask path {} ignored", p.display());
        }
    }
    let masks = paths.iter().map(read_mask).collect::<Result<Vec<_>>>()?;

    let explicit = match (&a.model_spec, &a.checkpoint) {
        (Some(spec), Some(ck)) => Some(load_model(spec, &read_container(ck)?)?),
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "--model-spec needs --checkpoint for layer shapes".into(),
            ))
        }
        _ => None,
    };
    let embedded: Vec<Option<PrunableModel>> = masks
        .iter()
        .map(|m| {
            m.model_spec
                .as_deref()
                .map(PrunableModel::from_json)
                .transpose()
        })
        .collect::<Result<_>>()?;
    let mut model = explicit;
    for (path, m) in paths.iter().zip(&embedded) {
        if let Some(m) = m {
            match &model {
                None => model = Some(m.clone()),
                Some(existing) if existing != m => {
                    return Err(Error::LayerMismatch(format!(
                        "mask {} was built for a different model",
                        path.display()
                    )))
                }
                _ => {}
            }
        }
    }
    let model = model.ok_or_else(|| {
        Error::InvalidArgument(
            "masks carry no model spec; pass --model-spec and --checkpoint".into(),
        )
    })?;
    let reports = masks
        .iter()
        .map(|m| sparsity_report(m, &model))
        .collect::<Result<Vec<_>>>()?;
    write_text(&a.out_csv, &combined_report_csv(&reports)?)?;
    if let Some(p) = &a.out_json {
        write_text(
            p,
            &serde_json::to_string_pretty(&reports).expect("reports serialize"),
        )?;
    }
    println!(
        "{} series written to {}",
        reports.len(),
        a.out_csv.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_toybench(a: &ToybenchArgs) -> Result<i32> {
    let mut cfg = ExperimentConfig {
        methods: a.methods.clone(),
        sparsities: a.sparsities.clone(),
        seeds: a.seeds.clone(),
        ..ExperimentConfig::default()
    };
    cfg.finetune.steps = a.steps;
    cfg.pretrain.steps = a.pretrain_steps;
    let results = run_experiment_to_dir(&cfg, &a.out_dir)?;
    for row in &results.summary {
        let acc = row
            .median_accuracy
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "diverged".into());
        println!(
            "{:<20} sparsity {:.2}  median accuracy {acc}",
            row.method.as_str(),
            row.sparsity
        );
    }
    Ok(EXIT_OK)
}
