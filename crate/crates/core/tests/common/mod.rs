#![allow(dead_code)]

use std::collections::BTreeMap;

use multiflow::modelspec::{LayerSpec, PrunableModel};
use multiflow::tensorstore::{DenseTensor, TensorMap};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Kept indices of a top-k by full sort: value descending, then index
/// ascending.
pub fn oracle_topk(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Random weight matrix and positive input norms.
pub fn random_layer(rng: &mut ChaCha8Rng, max_dim: usize) -> (usize, usize, Vec<f32>, Vec<f32>) {
    let rows = rng.random_range(1..=max_dim);
    let cols = rng.random_range(1..=max_dim);
    let w = (0..rows * cols)
        .map(|_| rng.random_range(-2.0f32..2.0))
        .collect();
    let n = (0..cols).map(|_| rng.random_range(0.01f32..5.0)).collect();
    (rows, cols, w, n)
}

/// Model whose weights are a random permutation of distinct magnitudes
/// with random signs, spread over `modalities`.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    modalities: &[&str],
    layers: usize,
    max_dim: usize,
) -> (PrunableModel, TensorMap) {
    let shapes: Vec<(usize, usize)> = (0..layers)
        .map(|_| (rng.random_range(1..=max_dim), rng.random_range(1..=max_dim)))
        .collect();
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let mut magnitudes: Vec<f32> = (1..=total).map(|i| i as f32 / total as f32).collect();
    magnitudes.shuffle(rng);
    let mut tm = TensorMap::new();
    let mut specs = Vec::new();
    let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
    let mut offset = 0;
    for (i, &(r, c)) in shapes.iter().enumerate() {
        let modality = modalities[if i < modalities.len() {
            i
        } else {
            rng.random_range(0..modalities.len())
        }];
        let values: Vec<f32> = magnitudes[offset..offset + r * c]
            .iter()
            .map(|&m| if rng.random_bool(0.5) { m } else { -m })
            .collect();
        offset += r * c;
        let name = format!("layer{i:02}");
        tm.insert(name.clone(), DenseTensor::f32(vec![r, c], values).unwrap());
        let d = depth.entry(modality).or_insert(0);
        specs.push(LayerSpec {
            name,
            out_dim: r,
            in_dim: c,
            modality: modality.to_string(),
            depth_index: *d,
            tie_group: None,
        });
        *d += 1;
    }
    let model =
        PrunableModel::new(modalities.iter().map(|m| m.to_string()).collect(), specs).unwrap();
    (model, tm)
}

/// Positive norms for every layer input of `model`.
pub fn random_stats(
    rng: &mut ChaCha8Rng,
    model: &PrunableModel,
) -> multiflow::calibration::ActivationStats {
    let mut acc = multiflow::calibration::NormAccumulator::new(model);
    for layer in &model.layers {
        let rows = 3;
        let batch: Vec<f32> = (0..rows * layer.in_dim)
            .map(|_| rng.random_range(-3.0f32..3.0))
            .collect();
        acc.accumulate(
            &layer.name,
            multiflow::matrix::MatrixView::new(rows, layer.in_dim, &batch).unwrap(),
        )
        .unwrap();
    }
    acc.finalize().unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
