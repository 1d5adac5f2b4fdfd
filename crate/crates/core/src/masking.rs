//! Binary keep masks: construction, tying, application and reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::budgeting::{BudgetPlan, BudgetPolicy};
use crate::error::{Error, Result};
use crate::modelspec::PrunableModel;
use crate::scoring::{Criterion, ScoreMatrix};
use crate::tensorstore::{read_container, write_container, DenseTensor, TensorMap, TopkCut};

const MASK_SUFFIX: &str = ".mask";

/// 0/1 keep mask of one layer, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u8>,
}

impl LayerMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn size(&self) -> usize {
        self.bits.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub criterion: Criterion,
    pub policy: BudgetPolicy,
    pub keep_ratio: f64,
    pub inverted: bool,
    pub layers: BTreeMap<String, LayerMask>,
    /// Serialized topology the mask was built for.
    pub model_spec: Option<String>,
    /// Free-form series name used by combined reports.
    pub label: Option<String>,
}

impl PruneMask {
    pub fn new(
        criterion: Criterion,
        policy: BudgetPolicy,
        keep_ratio: f64,
        inverted: bool,
    ) -> Self {
        Self {
            criterion,
            policy,
            keep_ratio,
            inverted,
            layers: BTreeMap::new(),
            model_spec: None,
            label: None,
        }
    }

    /// Series name: the label when present, else criterion/policy[/inverted].
    pub fn series_name(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        let mut name = format!("{}/{}", self.criterion, self.policy);
        if self.inverted {
            name.push_str("/inverted");
        }
        name
    }

    pub fn total_kept(&self) -> usize {
        self.layers.values().map(LayerMask::kept).sum()
    }
}

/// Keeps the `k` highest scores of one layer (or the `k` lowest when
/// `invert` is set); ties resolve to the lower flat index either way.
pub fn build_layer_mask(scores: &ScoreMatrix, k: usize, invert: bool) -> Result<LayerMask> {
    let n = scores.values.len();
    if k > n {
        return Err(Error::KTooLarge { k, len: n });
    }
    let key = |v: f32| if invert { -v } else { v };
    let mut scratch: Vec<f32> = scores.values.iter().map(|&v| key(v)).collect();
    let cut = TopkCut::from_scratch(&mut scratch, k)?;
    drop(scratch);
    let mut cursor = cut.cursor();
    let bits = scores
        .values
        .iter()
        .map(|&v| u8::from(cursor.keep(key(v))))
        .collect();
    Ok(LayerMask {
        rows: scores.rows,
        cols: scores.cols,
        bits,
    })
}

pub fn build_mask(
    scores: &BTreeMap<String, ScoreMatrix>,
    budgets: &BudgetPlan,
    invert: bool,
) -> Result<PruneMask> {
    if scores.len() != budgets.per_layer.len()
        || scores
            .keys()
            .zip(budgets.per_layer.keys())
            .any(|(a, b)| a != b)
    {
        return Err(Error::LayerMismatch(
            "scores and budgets cover different layers".into(),
        ));
    }
    let mut criterion = None;
    let mut mask = PruneMask::new(
        Criterion::Magnitude,
        budgets.policy,
        budgets.keep_ratio,
        invert,
    );
    for ((name, s), &k) in scores.iter().zip(budgets.per_layer.values()) {
        match criterion {
            None => criterion = Some(s.criterion),
            Some(c) if c != s.criterion => {
                return Err(Error::CriterionMismatch {
                    expected: c.to_string(),
                    found: s.criterion.to_string(),
                    layer: name.clone(),
                })
            }
            Some(_) => {}
        }
        mask.layers
            .insert(name.clone(), build_layer_mask(s, k, invert)?);
    }
    if let Some(c) = criterion {
        mask.criterion = c;
    }
    Ok(mask)
}

/// Copies each group's first (canonical) mask onto the other members.
pub fn propagate_tying(mut mask: PruneMask, groups: &[Vec<String>]) -> Result<PruneMask> {
    for group in groups.iter().filter(|g| g.len() > 1) {
        let canonical =
            mask.layers.get(&group[0]).cloned().ok_or_else(|| {
                Error::LayerMismatch(format!("no mask for canonical '{}'", group[0]))
            })?;
        for member in &group[1..] {
            let slot = mask
                .layers
                .get_mut(member)
                .ok_or_else(|| Error::LayerMismatch(format!("no mask for tied '{member}'")))?;
            if (slot.rows, slot.cols) != (canonical.rows, canonical.cols) {
                return Err(Error::TieShapeConflict(group[0].clone()));
            }
            *slot = canonical.clone();
        }
    }
    Ok(mask)
}

/// Zeroes every masked-out weight; tensors without a mask pass through.
pub fn apply_mask(checkpoint: &TensorMap, mask: &PruneMask) -> Result<TensorMap> {
    let mut out = checkpoint.clone();
    for (name, lm) in &mask.layers {
        let tensor = checkpoint
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let weights = tensor
            .as_f32()
            .filter(|_| tensor.shape() == [lm.rows, lm.cols])
            .ok_or_else(|| Error::ShapeMismatch {
                name: name.clone(),
                detail: format!(
                    "mask [{}, {}] vs tensor {} {:?}",
                    lm.rows,
                    lm.cols,
                    tensor.dtype().as_str(),
                    tensor.shape()
                ),
            })?;
        let masked = weights
            .iter()
            .zip(&lm.bits)
            .map(|(&w, &b)| if b != 0 { w } else { 0.0 })
            .collect();
        out.insert(
            name.clone(),
            DenseTensor::f32(vec![lm.rows, lm.cols], masked)?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSparsity {
    pub modality: String,
    pub depth_index: usize,
    pub layer: String,
    pub size: usize,
    pub kept: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalitySparsity {
    pub size: usize,
    pub kept: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub series: String,
    pub criterion: Criterion,
    pub policy: BudgetPolicy,
    pub keep_ratio: f64,
    pub inverted: bool,
    pub layers: Vec<LayerSparsity>,
    pub per_modality: BTreeMap<String, ModalitySparsity>,
    pub global_sparsity: f64,
    pub collapsed_layers: Vec<String>,
}

impl SparsityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV with columns modality, depth_index, layer, size, kept, sparsity.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "modality",
            "depth_index",
            "layer",
            "size",
            "kept",
            "sparsity",
        ])
        .map_err(fail)?;
        for l in &self.layers {
            w.write_record([
                l.modality.clone(),
                l.depth_index.to_string(),
                l.layer.clone(),
                l.size.to_string(),
                l.kept.to_string(),
                l.sparsity.to_string(),
            ])
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Per-layer and per-modality sparsity, ordered by modality then depth.
pub fn sparsity_report(mask: &PruneMask, model: &PrunableModel) -> Result<SparsityReport> {
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut per_modality: BTreeMap<String, ModalitySparsity> = BTreeMap::new();
    let mut collapsed = Vec::new();
    let (mut total, mut kept_total) = (0usize, 0usize);
    let modality_rank = |m: &str| {
        model
            .modalities
            .iter()
            .position(|x| x == m)
            .unwrap_or(usize::MAX)
    };
    let mut ordered: Vec<_> = model.layers.iter().collect();
    ordered.sort_by_key(|l| (modality_rank(&l.modality), l.depth_index));
    for spec in ordered {
        let lm = mask
            .layers
            .get(&spec.name)
            .ok_or_else(|| Error::LayerMismatch(format!("mask lacks layer '{}'", spec.name)))?;
        let size = spec.size();
        let kept = lm.kept();
        if kept == 0 {
            collapsed.push(spec.name.clone());
        }
        total += size;
        kept_total += kept;
        let entry = per_modality
            .entry(spec.modality.clone())
            .or_insert(ModalitySparsity {
                size: 0,
                kept: 0,
                sparsity: 0.0,
            });
        entry.size += size;
        entry.kept += kept;
        layers.push(LayerSparsity {
            modality: spec.modality.clone(),
            depth_index: spec.depth_index,
            layer: spec.name.clone(),
            size,
            kept,
            sparsity: 1.0 - kept as f64 / size as f64,
        });
    }
    for m in per_modality.values_mut() {
        m.sparsity = 1.0 - m.kept as f64 / m.size as f64;
    }
    if !collapsed.is_empty() {
        log::warn!(
            "{} layer(s) fully pruned: {}",
            collapsed.len(),
            collapsed.join(", ")
        );
    }
    Ok(SparsityReport {
        series: mask.series_name(),
        criterion: mask.criterion,
        policy: mask.policy,
        keep_ratio: mask.keep_ratio,
        inverted: mask.inverted,
        layers,
        per_modality,
        global_sparsity: if total == 0 {
            0.0
        } else {
            1.0 - kept_total as f64 / total as f64
        },
        collapsed_layers: collapsed,
    })
}

/// A broken mask invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingLayer {
        layer: String,
    },
    UnexpectedLayer {
        layer: String,
    },
    NonBinary {
        layer: String,
    },
    BudgetMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },
    TieViolation {
        canonical: String,
        member: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingLayer { layer } => {
                write!(f, "missing layer: '{layer}' has a budget but no mask")
            }
            Violation::UnexpectedLayer { layer } => {
                write!(f, "unexpected layer: '{layer}' has a mask but no budget")
            }
            Violation::NonBinary { layer } => write!(f, "non-binary mask entries in '{layer}'"),
            Violation::BudgetMismatch {
                layer,
                expected,
                actual,
            } => {
                write!(
                    f,
                    "budget mismatch in '{layer}': expected {expected} kept, found {actual}"
                )
            }
            Violation::TieViolation { canonical, member } => {
                write!(f, "tie violation: '{member}' differs from '{canonical}'")
            }
        }
    }
}

/// Checks every mask invariant; an empty list means the mask is valid.
pub fn verify_mask(
    mask: &PruneMask,
    budgets: &BudgetPlan,
    groups: &[Vec<String>],
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (layer, &expected) in &budgets.per_layer {
        let Some(lm) = mask.layers.get(layer) else {
            out.push(Violation::MissingLayer {
                layer: layer.clone(),
            });
            continue;
        };
        if lm.bits.iter().any(|&b| b > 1) {
            out.push(Violation::NonBinary {
                layer: layer.clone(),
            });
        }
        let actual = lm.kept();
        if actual != expected {
            out.push(Violation::BudgetMismatch {
                layer: layer.clone(),
                expected,
                actual,
            });
        }
    }
    for layer in mask.layers.keys() {
        if !budgets.per_layer.contains_key(layer) {
            out.push(Violation::UnexpectedLayer {
                layer: layer.clone(),
            });
        }
    }
    for group in groups.iter().filter(|g| g.len() > 1) {
        let Some(first) = mask.layers.get(&group[0]) else {
            continue;
        };
        for member in &group[1..] {
            if mask.layers.get(member).is_some_and(|m| m != first) {
                out.push(Violation::TieViolation {
                    canonical: group[0].clone(),
                    member: member.clone(),
                });
            }
        }
    }
    out
}

impl PruneMask {
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut tm = TensorMap::new();
        for (name, lm) in &self.layers {
            tm.insert(
                format!("{name}{MASK_SUFFIX}"),
                DenseTensor::u8(vec![lm.rows, lm.cols], lm.bits.clone())?,
            );
        }
        tm.set_metadata("criterion", self.criterion.as_str());
        tm.set_metadata("policy", self.policy.as_str());
        tm.set_metadata("keep_ratio", self.keep_ratio.to_string());
        tm.set_metadata("inverted", self.inverted.to_string());
        if let Some(spec) = &self.model_spec {
            tm.set_metadata("model_spec", spec.clone());
        }
        if let Some(label) = &self.label {
            tm.set_metadata("label", label.clone());
        }
        Ok(tm)
    }

    pub fn from_tensor_map(tm: &TensorMap) -> Result<Self> {
        let meta = tm.metadata();
        let field = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::Format(format!("mask metadata lacks '{key}'")))
        };
        let criterion = field("criterion")?.parse()?;
        let policy = field("policy")?.parse()?;
        let keep_ratio = field("keep_ratio")?
            .parse::<f64>()
            .map_err(|_| Error::Format("keep_ratio is not a number".into()))?;
        let inverted = field("inverted")?
            .parse::<bool>()
            .map_err(|_| Error::Format("inverted is not a boolean".into()))?;
        let mut mask = PruneMask::new(criterion, policy, keep_ratio, inverted);
        mask.model_spec = meta.get("model_spec").cloned();
        mask.label = meta.get("label").cloned();
        for (name, tensor) in tm.iter() {
            let Some(layer) = name.strip_suffix(MASK_SUFFIX) else {
                continue;
            };
            let (&[rows, cols], Some(bits)) = (tensor.shape(), tensor.as_u8()) else {
                return Err(Error::Format(format!("'{name}' must be a 2-D U8 tensor")));
            };
            mask.layers.insert(
                layer.to_string(),
                LayerMask {
                    rows,
                    cols,
                    bits: bits.to_vec(),
                },
            );
        }
        Ok(mask)
    }
}

pub fn write_mask(mask: &PruneMask, path: impl AsRef<Path>) -> Result<()> {
    write_container(&mask.to_tensor_map()?, path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<PruneMask> {
    PruneMask::from_tensor_map(&read_container(path)?)
}
