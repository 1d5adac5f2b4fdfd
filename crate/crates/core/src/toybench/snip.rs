//! Gradient-based baselines: one-shot connection sensitivity and its
//! iterative variant with an exponential keep schedule.

use std::collections::BTreeMap;

use crate::budgeting::BudgetPolicy;
use crate::error::{Error, Result};
use crate::masking::{LayerMask, PruneMask};
use crate::modelspec::PrunableModel;
use crate::pipeline::{prune_with_scores, PruneRequest};
use crate::scoring::{Criterion, ScoreMatrix};

use super::model::{ToyBatch, ToyVlm};
use super::train::{apply_flags, keep_flags};

/// `|theta * g|` with `g` the loss gradient summed over `batches`.
pub fn snip_scores(model: &ToyVlm, batches: &[ToyBatch]) -> Result<BTreeMap<String, ScoreMatrix>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument(
            "sensitivity scoring needs at least one batch".into(),
        ));
    }
    let mut total: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    for batch in batches {
        let (_, grads) = model.loss_and_grads(batch)?;
        for (t, g) in total.iter_mut().zip(&grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(model
        .config
        .layers()
        .iter()
        .zip(model.weights.iter().zip(&total))
        .map(|(&(name, _, _, rows, cols), (w, g))| {
            let values = w.iter().zip(g).map(|(a, b)| (a * b).abs() as f32).collect();
            let scores = ScoreMatrix {
                layer: name.to_string(),
                criterion: Criterion::Snip,
                rows,
                cols,
                values,
                rng_seed: None,
            };
            (name.to_string(), scores)
        })
        .collect())
}

/// Keep ratio after each of `rounds` rounds: `final^(t / rounds)`.
pub fn itersnip_schedule(keep_final: f64, rounds: usize) -> Vec<f64> {
    (1..=rounds)
        .map(|t| keep_final.powf(t as f64 / rounds as f64))
        .collect()
}

/// Splits `n` items into `parts` contiguous shards whose sizes differ by at
/// most one, larger shards first.
fn shard_bounds(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let b = (start, start + len);
            start += len;
            b
        })
        .collect()
}

fn one_shot(
    model: &PrunableModel,
    checkpoint_model: &ToyVlm,
    scores: &BTreeMap<String, ScoreMatrix>,
    keep: f64,
) -> Result<PruneMask> {
    let req = PruneRequest::new(Criterion::Snip, BudgetPolicy::GlobalScore, 1.0 - keep);
    let outcome = prune_with_scores(model, &checkpoint_model.to_checkpoint(), scores, &req)?;
    if let Some(v) = outcome.violations.first() {
        return Err(Error::InvalidArgument(format!(
            "sensitivity mask failed verification: {v}"
        )));
    }
    Ok(outcome.mask)
}

/// One-shot sensitivity mask at `keep_ratio` under global top-k.
pub fn snip_mask(model: &ToyVlm, batches: &[ToyBatch], keep_ratio: f64) -> Result<PruneMask> {
    let spec = model.config.prunable_model();
    one_shot(&spec, model, &snip_scores(model, batches)?, keep_ratio)
}

/// Iterative sensitivity pruning over `rounds` shards of `batches`. Round
/// `t` rescores the surviving weights on shard `t`; pruned weights score
/// below every survivor so they stay pruned.
pub fn itersnip(
    model: &ToyVlm,
    batches: &[ToyBatch],
    rounds: usize,
    keep_final: f64,
) -> Result<PruneMask> {
    let mut trace = itersnip_trace(model, batches, rounds, keep_final)?;
    let mut mask = trace.pop().expect("at least one round");
    mask.keep_ratio = keep_final;
    Ok(mask)
}

/// The mask after every round of [`itersnip`].
pub fn itersnip_trace(
    model: &ToyVlm,
    batches: &[ToyBatch],
    rounds: usize,
    keep_final: f64,
) -> Result<Vec<PruneMask>> {
    if rounds == 0 {
        return Err(Error::InvalidArgument(
            "iterative pruning needs at least one round".into(),
        ));
    }
    if rounds > batches.len() {
        return Err(Error::InvalidArgument(format!(
            "{rounds} rounds exceed the {} available batches",
            batches.len()
        )));
    }
    let spec = model.config.prunable_model();
    let mut mask = PruneMask::new(Criterion::Snip, BudgetPolicy::GlobalScore, 1.0, false);
    for layer in &spec.layers {
        mask.layers.insert(
            layer.name.clone(),
            LayerMask::ones(layer.out_dim, layer.in_dim),
        );
    }
    let schedule = itersnip_schedule(keep_final, rounds);
    let mut trace = Vec::with_capacity(rounds);
    for ((lo, hi), keep) in shard_bounds(batches.len(), rounds)
        .into_iter()
        .zip(schedule)
    {
        let mut current = model.clone();
        apply_flags(&mut current, &keep_flags(model, &mask)?);
        let mut scores = snip_scores(&current, &batches[lo..hi])?;
        for (name, s) in scores.iter_mut() {
            for (v, &bit) in s.values.iter_mut().zip(&mask.layers[name].bits) {
                if bit == 0 {
                    *v = -1.0;
                }
            }
        }
        mask = one_shot(&spec, model, &scores, keep)?;
        trace.push(mask.clone());
    }
    Ok(trace)
}
