//! Score -> budget -> mask composition shared by the CLI and the toy bench.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::budgeting::{
    budgets_global_magnitude, budgets_global_score, budgets_multimodal, budgets_uniform,
    BudgetPlan, BudgetPolicy,
};
use crate::calibration::ActivationStats;
use crate::error::{Error, Result};
use crate::masking::{
    build_layer_mask, propagate_tying, sparsity_report, verify_mask, LayerMask, PruneMask,
    SparsityReport, Violation,
};
use crate::matrix::MatrixView;
use crate::modelspec::{resolve_tying, LayerSpec, PrunableModel};
use crate::scoring::{score_layer, Criterion, ScoreMatrix};
use crate::tensorstore::TensorMap;

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRequest {
    pub criterion: Criterion,
    pub policy: BudgetPolicy,
    /// Fraction of prunable parameters removed; the keep ratio is `1 - sparsity`.
    pub sparsity: f64,
    pub invert: bool,
    pub seed: u64,
    pub label: Option<String>,
}

impl PruneRequest {
    pub fn new(criterion: Criterion, policy: BudgetPolicy, sparsity: f64) -> Self {
        Self {
            criterion,
            policy,
            sparsity,
            invert: false,
            seed: 0,
            label: None,
        }
    }

    pub fn keep_ratio(&self) -> f64 {
        1.0 - self.sparsity
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub mask: PruneMask,
    pub budgets: BudgetPlan,
    pub report: SparsityReport,
    pub violations: Vec<Violation>,
}

/// Seed of the random-score stream for the `index`-th layer.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Prunes with one of the gradient-free criteria.
pub fn prune(
    model: &PrunableModel,
    checkpoint: &TensorMap,
    stats: Option<&ActivationStats>,
    req: &PruneRequest,
) -> Result<PruneOutcome> {
    if req.criterion.needs_stats() {
        let stats = stats.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "criterion {} requires activation statistics",
                req.criterion
            ))
        })?;
        stats.validate(model)?;
    }
    let scorer = |index: usize, layer: &LayerSpec| -> Result<ScoreMatrix> {
        let tensor = checkpoint
            .get(&layer.name)
            .ok_or_else(|| Error::MissingTensor(layer.name.clone()))?;
        let w = MatrixView::from_tensor(&layer.name, tensor)?;
        let norms = match stats {
            Some(s) if req.criterion.needs_stats() => Some(s.norms_for(model, &layer.name)?),
            _ => None,
        };
        score_layer(
            req.criterion,
            w,
            norms.as_deref(),
            layer_seed(req.seed, index),
        )
        .map(|s| s.named(&layer.name))
        .map_err(|e| match e {
            Error::DegenerateLayer(_) => Error::DegenerateLayer(layer.name.clone()),
            other => other,
        })
    };
    prune_with(model, checkpoint, req, scorer)
}

/// Prunes with precomputed scores for every canonical layer.
pub fn prune_with_scores(
    model: &PrunableModel,
    checkpoint: &TensorMap,
    scores: &BTreeMap<String, ScoreMatrix>,
    req: &PruneRequest,
) -> Result<PruneOutcome> {
    prune_with(model, checkpoint, req, |_, layer| {
        scores
            .get(&layer.name)
            .cloned()
            .ok_or_else(|| Error::LayerMismatch(format!("no scores for '{}'", layer.name)))
    })
}

fn prune_with<F>(
    model: &PrunableModel,
    checkpoint: &TensorMap,
    req: &PruneRequest,
    scorer: F,
) -> Result<PruneOutcome>
where
    F: Fn(usize, &LayerSpec) -> Result<ScoreMatrix> + Sync,
{
    if !(0.0..=1.0).contains(&req.sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity {} outside [0, 1]",
            req.sparsity
        )));
    }
    let keep_ratio = req.keep_ratio();
    let canonical: Vec<(usize, &LayerSpec)> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| model.is_canonical(l))
        .collect();

    let (budgets, masks) = match req.policy {
        BudgetPolicy::GlobalScore => {
            let scores = canonical
                .par_iter()
                .map(|&(i, l)| scorer(i, l).map(|s| (l.name.clone(), s)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let budgets = budgets_global_score(model, &scores, keep_ratio)?;
            let masks = canonical
                .par_iter()
                .map(|&(_, l)| {
                    build_layer_mask(&scores[&l.name], budgets.per_layer[&l.name], req.invert)
                        .map(|m| (l.name.clone(), m))
                })
                .collect::<Result<Vec<_>>>()?;
            (budgets, masks)
        }
        policy => {
            let budgets = match policy {
                BudgetPolicy::MultimodalMagnitude => {
                    budgets_multimodal(model, checkpoint, keep_ratio)?
                }
                BudgetPolicy::GlobalMagnitude => {
                    budgets_global_magnitude(model, checkpoint, keep_ratio)?
                }
                _ => budgets_uniform(model, keep_ratio)?,
            };
            // One layer's scores live at a time per worker.
            let masks = canonical
                .par_iter()
                .map(|&(i, l)| {
                    let s = scorer(i, l)?;
                    build_layer_mask(&s, budgets.per_layer[&l.name], req.invert)
                        .map(|m| (l.name.clone(), m))
                })
                .collect::<Result<Vec<_>>>()?;
            (budgets, masks)
        }
    };

    let mut mask = PruneMask::new(req.criterion, req.policy, keep_ratio, req.invert);
    mask.layers.extend(masks);
    for layer in &model.layers {
        mask.layers
            .entry(layer.name.clone())
            .or_insert_with(|| LayerMask::ones(layer.out_dim, layer.in_dim));
    }
    mask.model_spec = Some(model.to_json());
    mask.label = req.label.clone();
    let groups = resolve_tying(model);
    let mask = propagate_tying(mask, &groups)?;
    let violations = verify_mask(&mask, &budgets, &groups);
    let report = sparsity_report(&mask, model)?;
    Ok(PruneOutcome {
        mask,
        budgets,
        report,
        violations,
    })
}
