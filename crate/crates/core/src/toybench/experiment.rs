//! Pretrain, calibrate, prune, fine-tune and evaluate over a grid of
//! methods, sparsities and seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budgeting::BudgetPolicy;
use crate::calibration::{write_stats, ActivationStats, NormAccumulator};
use crate::error::{Error, Result};
use crate::masking::{sparsity_report, write_mask, PruneMask};
use crate::modelspec::PrunableModel;
use crate::pipeline::{prune, PruneRequest};
use crate::scoring::Criterion;
use crate::tensorstore::{write_container, TensorMap};

use super::data::{PairSetConfig, SyntheticPairSet};
use super::model::{ToyBatch, ToyConfig, ToyVlm};
use super::snip::{itersnip, snip_mask};
use super::train::{keep_flags, retrieval_accuracy, train, EvalConfig, TrainConfig};

const PRETRAIN_STREAM: u64 = 0;
const CALIBRATION_STREAM: u64 = 1;
const SENSITIVITY_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMethod {
    Dense,
    Multiflow,
    Random,
    MultiflowInverted,
    Omp,
    WoDistribution,
    WoMultimodality,
    Lamp,
    L2norm,
    EdgeOnly,
    NodesOnly,
    Snip,
    Itersnip,
}

impl ToyMethod {
    pub const ALL: [ToyMethod; 13] = [
        ToyMethod::Dense,
        ToyMethod::Multiflow,
        ToyMethod::Random,
        ToyMethod::MultiflowInverted,
        ToyMethod::Omp,
        ToyMethod::WoDistribution,
        ToyMethod::WoMultimodality,
        ToyMethod::Lamp,
        ToyMethod::L2norm,
        ToyMethod::EdgeOnly,
        ToyMethod::NodesOnly,
        ToyMethod::Snip,
        ToyMethod::Itersnip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToyMethod::Dense => "dense",
            ToyMethod::Multiflow => "multiflow",
            ToyMethod::Random => "random",
            ToyMethod::MultiflowInverted => "multiflow_inverted",
            ToyMethod::Omp => "omp",
            ToyMethod::WoDistribution => "wo_distribution",
            ToyMethod::WoMultimodality => "wo_multimodality",
            ToyMethod::Lamp => "lamp",
            ToyMethod::L2norm => "l2norm",
            ToyMethod::EdgeOnly => "edge_only",
            ToyMethod::NodesOnly => "nodes_only",
            ToyMethod::Snip => "snip",
            ToyMethod::Itersnip => "itersnip",
        }
    }

    /// Criterion and budget policy for the gradient-free methods.
    pub fn request(self, sparsity: f64, seed: u64) -> Option<PruneRequest> {
        use BudgetPolicy::*;
        use Criterion::*;
        let (criterion, policy, invert) = match self {
            ToyMethod::Multiflow => (Multiflow, MultimodalMagnitude, false),
            ToyMethod::Random => (Random, Uniform, false),
            ToyMethod::MultiflowInverted => (Multiflow, MultimodalMagnitude, true),
            ToyMethod::Omp => (Magnitude, GlobalMagnitude, false),
            ToyMethod::WoDistribution => (Multiflow, GlobalScore, false),
            ToyMethod::WoMultimodality => (Multiflow, GlobalMagnitude, false),
            ToyMethod::Lamp => (Lamp, GlobalScore, false),
            ToyMethod::L2norm => (L2norm, GlobalScore, false),
            ToyMethod::EdgeOnly => (MultiflowEdgeOnly, MultimodalMagnitude, false),
            ToyMethod::NodesOnly => (MultiflowNodesOnly, MultimodalMagnitude, false),
            ToyMethod::Dense | ToyMethod::Snip | ToyMethod::Itersnip => return None,
        };
        let mut req = PruneRequest::new(criterion, policy, sparsity);
        req.invert = invert;
        req.seed = seed;
        req.label = Some(self.as_str().to_string());
        Some(req)
    }
}

impl fmt::Display for ToyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = ToyMethod::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown method '{s}' (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ToyConfig,
    pub data: PairSetConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
    pub sensitivity_batches: usize,
    pub itersnip_rounds: usize,
    pub methods: Vec<ToyMethod>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ToyConfig::default(),
            data: PairSetConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            eval: EvalConfig::default(),
            calib_batches: 256,
            calib_batch_size: 32,
            sensitivity_batches: 64,
            itersnip_rounds: 8,
            methods: vec![
                ToyMethod::Dense,
                ToyMethod::Multiflow,
                ToyMethod::Random,
                ToyMethod::MultiflowInverted,
            ],
            sparsities: vec![0.75],
            seeds: (0..5).collect(),
        }
    }
}

/// Everything derived from one seed before any pruning happens.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub data: SyntheticPairSet,
    pub pretrained: ToyVlm,
    pub spec: PrunableModel,
    pub checkpoint: TensorMap,
    pub stats: ActivationStats,
}

/// Forwards `batches` matched batches of `batch_size` pairs through
/// `model`, accumulating the input norms of every layer in `spec`.
pub fn calibrate_toy(
    model: &ToyVlm,
    spec: &PrunableModel,
    data: &SyntheticPairSet,
    batches: usize,
    batch_size: usize,
) -> Result<NormAccumulator> {
    let mut acc = NormAccumulator::new(spec);
    let mut rng = data.stream(CALIBRATION_STREAM);
    for _ in 0..batches {
        model.record_activations(&data.matched_batch(&mut rng, batch_size), &mut acc)?;
    }
    Ok(acc)
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let mut data_cfg = cfg.data;
    data_cfg.d_in = cfg.model.d_in;
    let data = SyntheticPairSet::new(seed, data_cfg);
    let init = ToyVlm::init(cfg.model, seed);
    let mut pretrained = train(
        init,
        None,
        &data,
        &cfg.pretrain,
        data.stream(PRETRAIN_STREAM),
    )?
    .model;
    pretrained.round_to_f32();
    let spec = cfg.model.prunable_model();
    let mut acc = calibrate_toy(
        &pretrained,
        &spec,
        &data,
        cfg.calib_batches,
        cfg.calib_batch_size,
    )?;
    acc.set_source_digest(format!("toy:seed={seed}"));
    let stats = acc.finalize()?;
    Ok(SeedArtifacts {
        seed,
        spec,
        checkpoint: pretrained.to_checkpoint(),
        data,
        pretrained,
        stats,
    })
}

fn sensitivity_batches(cfg: &ExperimentConfig, art: &SeedArtifacts) -> Vec<ToyBatch> {
    let mut rng = art.data.stream(SENSITIVITY_STREAM);
    (0..cfg.sensitivity_batches)
        .map(|_| art.data.training_batch(&mut rng, cfg.finetune.batch_size))
        .collect()
}

/// The mask `method` produces at `sparsity`, or `None` for the dense run.
pub fn method_mask(
    cfg: &ExperimentConfig,
    art: &SeedArtifacts,
    method: ToyMethod,
    sparsity: f64,
) -> Result<Option<PruneMask>> {
    let keep = 1.0 - sparsity;
    let mut mask = match method {
        ToyMethod::Dense => return Ok(None),
        ToyMethod::Snip => snip_mask(&art.pretrained, &sensitivity_batches(cfg, art), keep)?,
        ToyMethod::Itersnip => itersnip(
            &art.pretrained,
            &sensitivity_batches(cfg, art),
            cfg.itersnip_rounds,
            keep,
        )?,
        _ => {
            let req = method
                .request(sparsity, art.seed)
                .expect("gradient-free method");
            let out = prune(&art.spec, &art.checkpoint, Some(&art.stats), &req)?;
            if let Some(v) = out.violations.first() {
                return Err(Error::InvalidArgument(format!(
                    "{method} mask failed verification: {v}"
                )));
            }
            out.mask
        }
    };
    mask.label = Some(method.as_str().to_string());
    mask.model_spec = Some(art.spec.to_json());
    Ok(Some(mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: ToyMethod,
    pub sparsity: f64,
    pub seed: u64,
    /// `None` when fine-tuning diverged.
    pub accuracy: Option<f64>,
    pub kept: usize,
    pub collapsed_layers: Vec<String>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Fine-tunes the pretrained model under `mask` and evaluates it.
pub fn run_one(
    cfg: &ExperimentConfig,
    art: &SeedArtifacts,
    method: ToyMethod,
    sparsity: f64,
    mask: Option<&PruneMask>,
) -> Result<RunRecord> {
    let (flags, kept, collapsed) = match mask {
        Some(m) => (
            Some(keep_flags(&art.pretrained, m)?),
            m.total_kept(),
            sparsity_report(m, &art.spec)?.collapsed_layers,
        ),
        None => (None, art.spec.unique_param_count(), Vec::new()),
    };
    let record = |accuracy, final_loss, error| RunRecord {
        method,
        sparsity,
        seed: art.seed,
        accuracy,
        kept,
        collapsed_layers: collapsed.clone(),
        final_loss,
        error,
    };
    match train(
        art.pretrained.clone(),
        flags,
        &art.data,
        &cfg.finetune,
        art.data.stream(FINETUNE_STREAM),
    ) {
        Ok(state) => Ok(record(
            Some(retrieval_accuracy(&state.model, &art.data, &cfg.eval)),
            Some(state.last_loss),
            None,
        )),
        Err(e @ Error::Diverged(_)) => {
            log::warn!("{method} at sparsity {sparsity}, seed {}: {e}", art.seed);
            Ok(record(None, None, Some(e.to_string())))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: ToyMethod,
    pub sparsity: f64,
    /// Median over the seeds that did not diverge.
    pub median_accuracy: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    /// Layers collapsed in at least one seed.
    pub collapsed_layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

impl ExperimentResults {
    fn from_runs(mut runs: Vec<RunRecord>) -> Self {
        runs.sort_by(|a, b| {
            (a.method, a.seed)
                .cmp(&(b.method, b.seed))
                .then(a.sparsity.total_cmp(&b.sparsity))
        });
        let mut groups: BTreeMap<(ToyMethod, u64), Vec<&RunRecord>> = BTreeMap::new();
        for r in &runs {
            groups
                .entry((r.method, r.sparsity.to_bits()))
                .or_default()
                .push(r);
        }
        let mut summary: Vec<SummaryRow> = groups
            .into_iter()
            .map(|((method, bits), rs)| {
                let accs: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
                let mut collapsed: Vec<String> =
                    rs.iter().flat_map(|r| r.collapsed_layers.clone()).collect();
                collapsed.sort();
                collapsed.dedup();
                SummaryRow {
                    method,
                    sparsity: f64::from_bits(bits),
                    median_accuracy: median(&accs),
                    runs: rs.len(),
                    failed: rs.len() - accs.len(),
                    collapsed_layers: collapsed,
                }
            })
            .collect();
        summary.sort_by(|a, b| {
            a.method
                .cmp(&b.method)
                .then(a.sparsity.total_cmp(&b.sparsity))
        });
        Self { runs, summary }
    }

    pub fn median(&self, method: ToyMethod, sparsity: f64) -> Option<f64> {
        self.row(method, sparsity).and_then(|r| r.median_accuracy)
    }

    pub fn row(&self, method: ToyMethod, sparsity: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.sparsity == sparsity)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    /// One row per run followed by nothing else; medians live in the JSON.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "method",
            "sparsity",
            "seed",
            "accuracy",
            "kept",
            "collapsed_layers",
            "error",
        ])
        .map_err(csv_err)?;
        for r in &self.runs {
            w.write_record([
                r.method.as_str().to_string(),
                r.sparsity.to_string(),
                r.seed.to_string(),
                r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                r.kept.to_string(),
                r.collapsed_layers.join(";"),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Runs the grid. The dense method is run once per seed at sparsity 0.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    run_experiment_with(cfg, |_, _| Ok(()), |_, _| Ok(()))
}

/// Writes the per-seed checkpoint, stats and every mask under `out_dir`,
/// plus `results.csv` and `results.json`.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResults> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seed_dir = |seed: u64| out_dir.join(format!("seed_{seed}"));
    let results = run_experiment_with(
        cfg,
        |art, cfg| {
            let dir = seed_dir(art.seed);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_container(&art.checkpoint, dir.join("checkpoint.safetensors"))?;
            write_stats(&art.stats, dir.join("stats.safetensors"))?;
            std::fs::write(
                dir.join("model_spec.json"),
                cfg.model.model_spec_config().to_json(),
            )
            .map_err(|e| Error::io(dir.join("model_spec.json"), e))
        },
        |art, mask| {
            let name = format!(
                "mask_{}_{}.safetensors",
                mask.label.as_deref().unwrap_or("mask"),
                mask_tag(mask)
            );
            write_mask(mask, seed_dir(art.seed).join(name))
        },
    )?;
    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, results.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("results.json");
    std::fs::write(&json_path, results.to_json()).map_err(|e| Error::io(&json_path, e))?;
    Ok(results)
}

fn mask_tag(mask: &PruneMask) -> String {
    format!("s{:.2}", 1.0 - mask.keep_ratio)
}

fn run_experiment_with<S, M>(
    cfg: &ExperimentConfig,
    on_seed: S,
    on_mask: M,
) -> Result<ExperimentResults>
where
    S: Fn(&SeedArtifacts, &ExperimentConfig) -> Result<()> + Sync,
    M: Fn(&SeedArtifacts, &PruneMask) -> Result<()> + Sync,
{
    if cfg.seeds.is_empty() || cfg.methods.is_empty() {
        return Err(Error::InvalidArgument(
            "experiment needs at least one method and one seed".into(),
        ));
    }
    if let Some(s) = cfg.sparsities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!(
            "sparsity {s} outside [0, 1]"
        )));
    }
    let artifacts = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let art = prepare_seed(cfg, seed)?;
            on_seed(&art, cfg)?;
            Ok(art)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for art in &artifacts {
        for &method in &cfg.methods {
            if method == ToyMethod::Dense {
                jobs.push((art, method, 0.0));
            } else {
                jobs.extend(cfg.sparsities.iter().map(|&s| (art, method, s)));
            }
        }
    }
    let runs = jobs
        .par_iter()
        .map(|&(art, method, sparsity)| {
            let mask = method_mask(cfg, art, method, sparsity)?;
            if let Some(m) = &mask {
                on_mask(art, m)?;
            }
            run_one(cfg, art, method, sparsity, mask.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResults::from_runs(runs))
}
