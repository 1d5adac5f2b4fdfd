//! Per-layer keep counts.
//!
//! The default policy ranks weights by magnitude inside each modality's
//! parameter pool and lets every layer keep as many weights as land in that
//! pool's top-k. Each modality keeps (as nearly as integers allow) the same
//! fraction of its parameters. Tied layers are counted once: only the
//! canonical member of a tie group enters a pool and the other members copy
//! its count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelspec::{LayerSpec, PrunableModel};
use crate::scoring::ScoreMatrix;
use crate::tensorstore::{TensorMap, TopkCut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    MultimodalMagnitude,
    GlobalMagnitude,
    GlobalScore,
    Uniform,
}

impl BudgetPolicy {
    pub const ALL: [BudgetPolicy; 4] = [
        BudgetPolicy::MultimodalMagnitude,
        BudgetPolicy::GlobalMagnitude,
        BudgetPolicy::GlobalScore,
        BudgetPolicy::Uniform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BudgetPolicy::MultimodalMagnitude => "multimodal_magnitude",
            BudgetPolicy::GlobalMagnitude => "global_magnitude",
            BudgetPolicy::GlobalScore => "global_score",
            BudgetPolicy::Uniform => "uniform",
        }
    }
}

impl fmt::Display for BudgetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BudgetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BudgetPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown budget policy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub policy: BudgetPolicy,
    pub keep_ratio: f64,
    pub per_modality: BTreeMap<String, usize>,
    pub per_layer: BTreeMap<String, usize>,
}

impl BudgetPlan {
    pub fn keep(&self, layer: &str) -> Option<usize> {
        self.per_layer.get(layer).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("budget plan serializes")
    }
}

fn check_ratio(keep_ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::InvalidArgument(format!(
            "keep ratio {keep_ratio} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `round(keep_ratio * n)`, the exact number of parameters a plan keeps.
pub fn keep_total(keep_ratio: f64, n: usize) -> usize {
    ((keep_ratio * n as f64).round() as usize).min(n)
}

/// House-monotone quota apportionment of `total` units proportional to
/// `sizes`.
///
/// Units are handed out one at a time. Unit `h` goes to an entry whose next
/// unit keeps it within its upper quota `h·size/n + 1`, picking the earliest
/// lower-quota deadline, then the largest deficit `h·size/n − count`, then the
/// earlier entry. Every prefix therefore stays within one unit of its exact
/// share, and counts for `total + 1` extend those for `total`, which plain
/// largest remainder does not guarantee.
pub fn apportion_monotone(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: u128 = sizes.iter().map(|&s| s as u128).sum();
    let total = (total as u128).min(n) as usize;
    let mut counts = vec![0usize; sizes.len()];
    for h in 1..=total as u128 {
        let mut best: Option<(usize, u128, u128)> = None;
        for (i, &size) in sizes.iter().enumerate() {
            let (p, a) = (size as u128, counts[i] as u128);
            // Released: (a+1) - 1 < h·p/n.
            if a >= p || a * n >= h * p {
                continue;
            }
            // Smallest house size whose lower quota demands unit a+1.
            let deadline = ((a + 1) * n).div_ceil(p);
            // Deficit scaled by n; never negative for a released entry.
            let deficit = h * p - a * n;
            let better = match best {
                None => true,
                Some((_, d, f)) => deadline < d || (deadline == d && deficit > f),
            };
            if better {
                best = Some((i, deadline, deficit));
            }
        }
        let (i, _, _) = best.expect("some entry is always below its quota");
        counts[i] += 1;
    }
    counts
}

/// Largest-remainder apportionment of `total` units over `quotas`, never
/// exceeding `caps`. Remainder ties go to the earlier entry.
pub fn apportion(total: usize, quotas: &[f64], caps: &[usize]) -> Vec<usize> {
    debug_assert_eq!(quotas.len(), caps.len());
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(&q, &cap)| (q.max(0.0).floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = counts.iter().sum();
    // Float quotas can leave the floors a few units away from `total`.
    while assigned < total {
        let before = assigned;
        for &i in &order {
            if assigned == total {
                break;
            }
            if counts[i] < caps[i] {
                counts[i] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    while assigned > total {
        let before = assigned;
        for &i in order.iter().rev() {
            if assigned == total {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                assigned -= 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    counts
}

fn canonical_layers(model: &PrunableModel) -> Vec<&LayerSpec> {
    model
        .layers
        .iter()
        .filter(|l| model.is_canonical(l))
        .collect()
}

/// Keep count per modality, proportional to each modality's parameter count.
pub fn modality_keep_counts(
    model: &PrunableModel,
    keep_ratio: f64,
) -> Result<BTreeMap<String, usize>> {
    check_ratio(keep_ratio)?;
    let units = canonical_layers(model);
    let sizes: Vec<usize> = model
        .modalities
        .iter()
        .map(|m| {
            units
                .iter()
                .filter(|l| &l.modality == m)
                .map(|l| l.size())
                .sum()
        })
        .collect();
    let total = keep_total(keep_ratio, sizes.iter().sum());
    let counts = apportion_monotone(total, &sizes);
    Ok(model.modalities.iter().cloned().zip(counts).collect())
}

fn layer_weights<'a>(weights: &'a TensorMap, layer: &LayerSpec) -> Result<&'a [f32]> {
    let tensor = weights
        .get(&layer.name)
        .ok_or_else(|| Error::MissingTensor(layer.name.clone()))?;
    let data = tensor.as_f32().ok_or_else(|| Error::ShapeMismatch {
        name: layer.name.clone(),
        detail: "weights must be F32".into(),
    })?;
    if tensor.shape() != [layer.out_dim, layer.in_dim] {
        return Err(Error::ShapeMismatch {
            name: layer.name.clone(),
            detail: format!(
                "checkpoint shape {:?} vs spec [{}, {}]",
                tensor.shape(),
                layer.out_dim,
                layer.in_dim
            ),
        });
    }
    Ok(data)
}

/// Top-`k` over the concatenation of `pool` (in order) under `key`; returns
/// how many selected entries fall in each member. Ties at the cut go to the
/// earlier member, then to the lower flat index.
fn pool_counts(pool: &[&[f32]], k: usize, key: impl Fn(f32) -> f32) -> Result<Vec<usize>> {
    let len: usize = pool.iter().map(|p| p.len()).sum();
    let mut scratch = Vec::with_capacity(len);
    for part in pool {
        scratch.extend(part.iter().map(|&v| key(v)));
    }
    let cut = TopkCut::from_scratch(&mut scratch, k)?;
    drop(scratch);
    let mut cursor = cut.cursor();
    Ok(pool
        .iter()
        .map(|part| part.iter().filter(|&&v| cursor.keep(key(v))).count())
        .collect())
}

fn finish_plan(
    model: &PrunableModel,
    policy: BudgetPolicy,
    keep_ratio: f64,
    canonical_counts: BTreeMap<String, usize>,
) -> BudgetPlan {
    let mut per_layer = BTreeMap::new();
    let mut per_modality: BTreeMap<String, usize> =
        model.modalities.iter().map(|m| (m.clone(), 0)).collect();
    for layer in &model.layers {
        let canonical = model.canonical_of(&layer.name);
        let k = canonical_counts[canonical];
        per_layer.insert(layer.name.clone(), k);
        if canonical == layer.name {
            *per_modality.get_mut(&layer.modality).unwrap() += k;
        }
    }
    BudgetPlan {
        policy,
        keep_ratio,
        per_modality,
        per_layer,
    }
}

/// Modality-aware magnitude prior: a separate magnitude top-k per modality.
pub fn budgets_multimodal(
    model: &PrunableModel,
    weights: &TensorMap,
    keep_ratio: f64,
) -> Result<BudgetPlan> {
    let per_modality = modality_keep_counts(model, keep_ratio)?;
    let units = canonical_layers(model);
    let mut counts = BTreeMap::new();
    for (modality, &k) in &per_modality {
        let layers: Vec<&LayerSpec> = units
            .iter()
            .copied()
            .filter(|l| &l.modality == modality)
            .collect();
        let pool = layers
            .iter()
            .map(|l| layer_weights(weights, l))
            .collect::<Result<Vec<_>>>()?;
        let landed = pool_counts(&pool, k, f32::abs)?;
        for (layer, k_l) in layers.iter().zip(landed) {
            counts.insert(layer.name.clone(), k_l);
        }
    }
    Ok(finish_plan(
        model,
        BudgetPolicy::MultimodalMagnitude,
        keep_ratio,
        counts,
    ))
}

/// One magnitude pool over every prunable parameter, ignoring modality.
pub fn budgets_global_magnitude(
    model: &PrunableModel,
    weights: &TensorMap,
    keep_ratio: f64,
) -> Result<BudgetPlan> {
    check_ratio(keep_ratio)?;
    let units = canonical_layers(model);
    let pool = units
        .iter()
        .map(|l| layer_weights(weights, l))
        .collect::<Result<Vec<_>>>()?;
    let k = keep_total(keep_ratio, model.unique_param_count());
    let landed = pool_counts(&pool, k, f32::abs)?;
    let counts = units.iter().map(|l| l.name.clone()).zip(landed).collect();
    Ok(finish_plan(
        model,
        BudgetPolicy::GlobalMagnitude,
        keep_ratio,
        counts,
    ))
}

/// One pool over all score values: the resulting masks equal a global
/// top-k of the scores.
pub fn budgets_global_score(
    model: &PrunableModel,
    scores: &BTreeMap<String, ScoreMatrix>,
    keep_ratio: f64,
) -> Result<BudgetPlan> {
    check_ratio(keep_ratio)?;
    let units = canonical_layers(model);
    let mut pool = Vec::with_capacity(units.len());
    let mut criterion = None;
    for layer in &units {
        let s = scores
            .get(&layer.name)
            .ok_or_else(|| Error::LayerMismatch(format!("no scores for '{}'", layer.name)))?;
        if (s.rows, s.cols) != (layer.out_dim, layer.in_dim) {
            return Err(Error::ShapeMismatch {
                name: layer.name.clone(),
                detail: "score shape differs from layer".into(),
            });
        }
        match criterion {
            None => criterion = Some(s.criterion),
            Some(c) if c != s.criterion => {
                return Err(Error::CriterionMismatch {
                    expected: c.to_string(),
                    found: s.criterion.to_string(),
                    layer: layer.name.clone(),
                })
            }
            Some(_) => {}
        }
        pool.push(s.values.as_slice());
    }
    let k = keep_total(keep_ratio, model.unique_param_count());
    let landed = pool_counts(&pool, k, |v| v)?;
    let counts = units.iter().map(|l| l.name.clone()).zip(landed).collect();
    Ok(finish_plan(
        model,
        BudgetPolicy::GlobalScore,
        keep_ratio,
        counts,
    ))
}

/// Every layer keeps the same fraction, apportioned by largest remainder.
pub fn budgets_uniform(model: &PrunableModel, keep_ratio: f64) -> Result<BudgetPlan> {
    check_ratio(keep_ratio)?;
    let units = canonical_layers(model);
    let sizes: Vec<usize> = units.iter().map(|l| l.size()).collect();
    let quotas: Vec<f64> = sizes.iter().map(|&s| keep_ratio * s as f64).collect();
    let total = keep_total(keep_ratio, sizes.iter().sum());
    let landed = apportion(total, &quotas, &sizes);
    let counts = units.iter().map(|l| l.name.clone()).zip(landed).collect();
    Ok(finish_plan(
        model,
        BudgetPolicy::Uniform,
        keep_ratio,
        counts,
    ))
}
