//! Streaming per-input-neuron activation norms.
//!
//! For every prunable layer the accumulator keeps the running sum of squared
//! input activations per input neuron, pooled over every calibration token.
//! Finalizing takes the square root, giving the L2 norm of each input
//! neuron's activation vector over the whole calibration stream. Norms are
//! not divided by the token count; any uniform per-layer scale leaves the
//! within-layer ranking of every flow score unchanged.
//!
//! Sums are exact: the square of an f32 is an integer multiple of 2^-298, so
//! each running sum is kept as a fixed-point integer in those units. The
//! result is therefore independent of token order, batch grouping and how
//! shards are merged, and only the final conversion rounds.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::MatrixView;
use crate::modelspec::PrunableModel;
use crate::tensorstore::{read_container, write_container, DenseTensor, TensorMap};

const NORM_SUFFIX: &str = ".in_norm";

/// Limbs of an exact sum: squares span 2^-298 ..= 2^256 (554 bits) and up
/// to 2^64 terms add at most 64 more.
const LIMBS: usize = 10;
/// The unit of the fixed-point sum, the square of the smallest f32 subnormal.
const UNIT_EXP: i32 = -298;

/// `2^k` for normal-range `k`.
fn pow2(k: i32) -> f64 {
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Exact sum of squared f32 values, little-endian limbs in units of 2^-298.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct ExactSquareSum {
    limbs: [u64; LIMBS],
}

impl ExactSquareSum {
    fn add_square(&mut self, x: f32) {
        let bits = x.to_bits() & 0x7fff_ffff;
        if bits == 0 {
            return;
        }
        let (biased, frac) = ((bits >> 23) as i32, u64::from(bits & 0x7f_ffff));
        // x = m * 2^e
        let (m, e) = if biased == 0 {
            (frac, -149)
        } else {
            (frac | 0x80_0000, biased - 150)
        };
        let shift = (2 * e - UNIT_EXP) as u32;
        let wide = u128::from(m * m) << (shift % 64);
        self.add_at((shift / 64) as usize, [wide as u64, (wide >> 64) as u64]);
    }

    fn add_at(&mut self, mut i: usize, parts: [u64; 2]) {
        let mut carry = 0u64;
        for p in parts {
            let (s1, o1) = self.limbs[i].overflowing_add(p);
            let (s2, o2) = s1.overflowing_add(carry);
            self.limbs[i] = s2;
            carry = u64::from(o1) + u64::from(o2);
            i += 1;
        }
        while carry != 0 {
            let (s, o) = self.limbs[i].overflowing_add(carry);
            self.limbs[i] = s;
            carry = u64::from(o);
            i += 1;
        }
    }

    fn add(&mut self, other: &ExactSquareSum) {
        let mut carry = false;
        for (a, &b) in self.limbs.iter_mut().zip(&other.limbs) {
            let (s1, o1) = a.overflowing_add(b);
            let (s2, o2) = s1.overflowing_add(u64::from(carry));
            *a = s2;
            carry = o1 || o2;
        }
        debug_assert!(!carry, "exact sum overflow");
    }

    /// Correctly rounded value.
    fn to_f64(self) -> f64 {
        let Some(top) = (0..LIMBS).rev().find(|&i| self.limbs[i] != 0) else {
            return 0.0;
        };
        if top == 0 {
            return self.limbs[0] as f64 * pow2(UNIT_EXP);
        }
        // At least 65 significant bits; a sticky bit far below the rounding
        // position stands in for the truncated limbs.
        let mut window = (u128::from(self.limbs[top]) << 64) | u128::from(self.limbs[top - 1]);
        if self.limbs[..top - 1].iter().any(|&l| l != 0) {
            window |= 1;
        }
        window as f64 * pow2(64 * (top as i32 - 1) + UNIT_EXP)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSums {
    sumsq: Vec<ExactSquareSum>,
    rows: u64,
}

/// Running sums of squared activations for every prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAccumulator {
    layers: BTreeMap<String, LayerSums>,
    source_digest: String,
}

impl NormAccumulator {
    pub fn new(model: &PrunableModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                (
                    l.name.clone(),
                    LayerSums {
                        sumsq: vec![ExactSquareSum::default(); l.in_dim],
                        rows: 0,
                    },
                )
            })
            .collect();
        Self {
            layers,
            source_digest: String::new(),
        }
    }

    pub fn set_source_digest(&mut self, digest: impl Into<String>) {
        self.source_digest = digest.into();
    }

    /// Adds a `tokens x in_dim` batch of inputs observed at `layer`.
    pub fn accumulate(&mut self, layer: &str, batch: MatrixView<'_>) -> Result<()> {
        let sums = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::MissingTensor(layer.to_string()))?;
        if batch.cols() != sums.sumsq.len() {
            return Err(Error::ShapeMismatch {
                name: layer.to_string(),
                detail: format!(
                    "batch width {} does not match in_dim {}",
                    batch.cols(),
                    sums.sumsq.len()
                ),
            });
        }
        batch.ensure_finite(&format!("activations of '{layer}'"))?;
        for t in 0..batch.rows() {
            for (acc, &x) in sums.sumsq.iter_mut().zip(batch.row(t)) {
                acc.add_square(x);
            }
        }
        sums.rows += batch.rows() as u64;
        Ok(())
    }

    /// Folds another accumulator over a disjoint shard into this one.
    pub fn merge(&mut self, other: &NormAccumulator) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .keys()
                .zip(other.layers.keys())
                .any(|(a, b)| a != b)
        {
            return Err(Error::LayerMismatch(
                "accumulators cover different layers".into(),
            ));
        }
        for (mine, theirs) in self.layers.values_mut().zip(other.layers.values()) {
            if mine.sumsq.len() != theirs.sumsq.len() {
                return Err(Error::LayerMismatch("accumulator widths differ".into()));
            }
            for (a, b) in mine.sumsq.iter_mut().zip(&theirs.sumsq) {
                a.add(b);
            }
            mine.rows += theirs.rows;
        }
        Ok(())
    }

    /// Running sums for `layer`, each rounded once to f64.
    pub fn sumsq(&self, layer: &str) -> Option<Vec<f64>> {
        self.layers
            .get(layer)
            .map(|s| s.sumsq.iter().map(|s| s.to_f64()).collect())
    }

    /// Tokens in the calibration stream: the most rows any layer has seen.
    pub fn token_count(&self) -> u64 {
        self.layers.values().map(|s| s.rows).max().unwrap_or(0)
    }

    pub fn finalize(&self) -> Result<ActivationStats> {
        let token_count = self.token_count();
        if token_count == 0 {
            return Err(Error::NoCalibrationData("no tokens observed".into()));
        }
        let mut in_norm = BTreeMap::new();
        for (name, sums) in &self.layers {
            if sums.rows == 0 {
                return Err(Error::NoCalibrationData(format!(
                    "layer '{name}' saw no tokens"
                )));
            }
            in_norm.insert(
                name.clone(),
                sums.sumsq
                    .iter()
                    .map(|s| s.to_f64().sqrt() as f32)
                    .collect(),
            );
        }
        Ok(ActivationStats {
            in_norm,
            token_count,
            source_digest: self.source_digest.clone(),
        })
    }
}

/// Finalized per-input-neuron activation norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub in_norm: BTreeMap<String, Vec<f32>>,
    pub token_count: u64,
    pub source_digest: String,
}

impl ActivationStats {
    pub fn get(&self, layer: &str) -> Option<&[f32]> {
        self.in_norm.get(layer).map(Vec::as_slice)
    }

    /// Checks that every model layer has a norm vector of the right width.
    pub fn validate(&self, model: &PrunableModel) -> Result<()> {
        for layer in &model.layers {
            let norms = self
                .get(&layer.name)
                .ok_or_else(|| Error::MissingTensor(format!("{}{NORM_SUFFIX}", layer.name)))?;
            if norms.len() != layer.in_dim {
                return Err(Error::ShapeMismatch {
                    name: layer.name.clone(),
                    detail: format!("norm length {} vs in_dim {}", norms.len(), layer.in_dim),
                });
            }
            if norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite(format!("norms of '{}'", layer.name)));
            }
        }
        Ok(())
    }

    /// Input norms for scoring `layer`. Members of a tie group share one
    /// vector: squared norms are summed over every member before the root,
    /// which equals accumulating all call sites into a single stream.
    pub fn norms_for(&self, model: &PrunableModel, layer: &str) -> Result<Vec<f32>> {
        let spec = model
            .layer(layer)
            .ok_or_else(|| Error::MissingTensor(layer.to_string()))?;
        let members: Vec<&str> = match &spec.tie_group {
            None => vec![layer],
            Some(tag) => model
                .layers
                .iter()
                .filter(|l| l.tie_group.as_deref() == Some(tag))
                .map(|l| l.name.as_str())
                .collect(),
        };
        let fetch = |name: &str| {
            self.get(name)
                .filter(|v| v.len() == spec.in_dim)
                .ok_or_else(|| Error::MissingTensor(format!("{name}{NORM_SUFFIX}")))
        };
        if members.len() == 1 {
            return Ok(fetch(layer)?.to_vec());
        }
        let mut pooled = vec![0.0f64; spec.in_dim];
        for name in members {
            for (p, &v) in pooled.iter_mut().zip(fetch(name)?) {
                *p += f64::from(v) * f64::from(v);
            }
        }
        Ok(pooled.into_iter().map(|s| s.sqrt() as f32).collect())
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut tm = TensorMap::new();
        for (name, norms) in &self.in_norm {
            tm.insert(
                format!("{name}{NORM_SUFFIX}"),
                DenseTensor::f32(vec![norms.len()], norms.clone())?,
            );
        }
        tm.set_metadata("token_count", self.token_count.to_string());
        tm.set_metadata("source_digest", self.source_digest.clone());
        Ok(tm)
    }

    pub fn from_tensor_map(tm: &TensorMap) -> Result<Self> {
        let token_count: u64 = tm
            .metadata()
            .get("token_count")
            .ok_or_else(|| Error::Format("stats metadata lacks token_count".into()))?
            .parse()
            .map_err(|_| Error::Format("token_count is not an integer".into()))?;
        if token_count == 0 {
            return Err(Error::NoCalibrationData(
                "stats file records zero tokens".into(),
            ));
        }
        let source_digest = tm
            .metadata()
            .get("source_digest")
            .cloned()
            .unwrap_or_default();
        let mut in_norm = BTreeMap::new();
        for (name, tensor) in tm.iter() {
            let Some(layer) = name.strip_suffix(NORM_SUFFIX) else {
                continue;
            };
            let values = tensor
                .as_f32()
                .filter(|_| tensor.shape().len() == 1)
                .ok_or_else(|| Error::Format(format!("'{name}' must be a 1-D F32 tensor")))?;
            in_norm.insert(layer.to_string(), values.to_vec());
        }
        Ok(Self {
            in_norm,
            token_count,
            source_digest,
        })
    }
}

pub fn write_stats(stats: &ActivationStats, path: impl AsRef<Path>) -> Result<()> {
    write_container(&stats.to_tensor_map()?, path)
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<ActivationStats> {
    ActivationStats::from_tensor_map(&read_container(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelspec::LayerSpec;

    fn exact(values: &[f32]) -> f64 {
        let mut s = ExactSquareSum::default();
        for &v in values {
            s.add_square(v);
        }
        s.to_f64()
    }

    #[test]
    fn exact_sum_extremes() {
        assert_eq!(exact(&[]), 0.0);
        assert_eq!(exact(&[3.0, -4.0]), 25.0);
        assert_eq!(exact(&[f32::from_bits(1)]), pow2(-298));
        let max = f64::from(f32::MAX);
        assert_eq!(exact(&[f32::MAX]), max * max);
        // 2^120 + 1 is not an f64; the small term is absorbed by rounding.
        assert_eq!(exact(&[2f32.powi(60), 1.0]), 2f64.powi(120));
        assert_eq!(exact(&[2f32.powi(60), f32::from_bits(1)]), 2f64.powi(120));
    }

    #[test]
    fn exact_sum_rounds_ties_correctly() {
        // f64 spacing at 2^54 is 4, so 2^54 + 2 is a tie and goes to even.
        let big = 2f32.powi(27);
        assert_eq!(exact(&[big, 1.0, 1.0]), 2f64.powi(54));
        // Any nonzero remainder far below breaks the tie upwards.
        assert_eq!(
            exact(&[big, 1.0, 1.0, f32::from_bits(1)]),
            2f64.powi(54) + 4.0
        );
        assert_eq!(
            exact(&[f32::from_bits(1), 1.0, big, 1.0]),
            2f64.powi(54) + 4.0
        );
    }

    #[test]
    fn exact_sum_ignores_order_and_grouping() {
        let values: Vec<f32> = (0..500)
            .map(|i| ((i * 7919 % 1013) as f32 - 500.0) * 1.37e-3f32.powi(i % 5))
            .collect();
        let mut rev = values.clone();
        rev.reverse();
        assert_eq!(exact(&values).to_bits(), exact(&rev).to_bits());
        let (mut a, mut b) = (ExactSquareSum::default(), ExactSquareSum::default());
        for (i, &v) in values.iter().enumerate() {
            if i % 3 == 0 {
                a.add_square(v)
            } else {
                b.add_square(v)
            }
        }
        a.add(&b);
        assert_eq!(a.to_f64().to_bits(), exact(&values).to_bits());
        let naive: f64 = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        assert!((naive - exact(&values)).abs() <= 1e-12 * naive);
    }

    fn model(in_dims: &[usize]) -> PrunableModel {
        let layers = in_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| LayerSpec {
                name: format!("l{i}"),
                out_dim: 4,
                in_dim: d,
                modality: "vision".into(),
                depth_index: i,
                tie_group: None,
            })
            .collect();
        PrunableModel::new(vec!["vision".into()], layers).unwrap()
    }

    fn view(rows: usize, cols: usize, data: &[f32]) -> MatrixView<'_> {
        MatrixView::new(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_initialized() {
        let acc = NormAccumulator::new(&model(&[3]));
        assert_eq!(acc.sumsq("l0").unwrap(), &[0.0, 0.0, 0.0]);
        assert!(matches!(acc.finalize(), Err(Error::NoCalibrationData(_))));
        let empty = NormAccumulator::new(&PrunableModel::new(vec![], vec![]).unwrap());
        assert_eq!(empty.token_count(), 0);
    }

    #[test]
    fn single_token_and_sqrt() {
        let mut acc = NormAccumulator::new(&model(&[2]));
        acc.accumulate("l0", view(1, 2, &[3.0, 4.0])).unwrap();
        assert_eq!(acc.sumsq("l0").unwrap(), &[9.0, 16.0]);
        let stats = acc.finalize().unwrap();
        assert_eq!(stats.get("l0").unwrap(), &[3.0, 4.0]);
        assert_eq!(stats.token_count, 1);
    }

    #[test]
    fn order_independent_and_hand_sum() {
        let mut a = NormAccumulator::new(&model(&[2]));
        a.accumulate("l0", view(1, 2, &[1.0, 0.0])).unwrap();
        a.accumulate("l0", view(1, 2, &[0.0, 1.0])).unwrap();
        let mut b = NormAccumulator::new(&model(&[2]));
        b.accumulate("l0", view(1, 2, &[0.0, 1.0])).unwrap();
        b.accumulate("l0", view(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(a.sumsq("l0").unwrap(), &[1.0, 1.0]);
        assert_eq!(a.sumsq("l0"), b.sumsq("l0"));

        let mut c = NormAccumulator::new(&model(&[2]));
        c.accumulate("l0", view(2, 2, &[1.0, 1.0, 2.0, 2.0]))
            .unwrap();
        assert_eq!(c.sumsq("l0").unwrap(), &[5.0, 5.0]);
        let s = c.finalize().unwrap();
        assert_eq!(s.get("l0").unwrap(), &[5f32.sqrt(), 5f32.sqrt()]);
    }

    #[test]
    fn dead_inputs_allowed() {
        let mut acc = NormAccumulator::new(&model(&[2]));
        acc.accumulate("l0", view(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(acc.finalize().unwrap().get("l0").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_batches() {
        let mut acc = NormAccumulator::new(&model(&[2]));
        assert!(matches!(
            acc.accumulate("l0", view(1, 3, &[1.0, 2.0, 3.0])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            acc.accumulate("l0", view(1, 2, &[f32::NAN, 2.0])),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(acc.token_count(), 0);
    }

    #[test]
    fn unobserved_layer_blocks_finalize() {
        let mut acc = NormAccumulator::new(&model(&[2, 2]));
        acc.accumulate("l0", view(1, 2, &[1.0, 1.0])).unwrap();
        assert!(acc.finalize().is_err());
    }

    #[test]
    fn stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(&[2, 3]);
        let mut acc = NormAccumulator::new(&m);
        acc.set_source_digest("abc");
        acc.accumulate("l0", view(1, 2, &[1.0, 2.0])).unwrap();
        acc.accumulate("l1", view(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        let stats = acc.finalize().unwrap();
        let path = dir.path().join("stats.bin");
        write_stats(&stats, &path).unwrap();
        let back = read_stats(&path).unwrap();
        assert_eq!(back, stats);
        back.validate(&m).unwrap();

        let mut partial = back.clone();
        partial.in_norm.remove("l1");
        assert!(matches!(partial.validate(&m), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn zero_token_metadata_rejected() {
        let mut tm = TensorMap::new();
        tm.set_metadata("token_count", "0");
        assert!(ActivationStats::from_tensor_map(&tm).is_err());
    }

    #[test]
    fn tied_layers_pool_squared_norms() {
        let layers = vec![
            LayerSpec {
                name: "enc".into(),
                out_dim: 1,
                in_dim: 2,
                modality: "text".into(),
                depth_index: 0,
                tie_group: Some("g".into()),
            },
            LayerSpec {
                name: "dec".into(),
                out_dim: 1,
                in_dim: 2,
                modality: "text".into(),
                depth_index: 1,
                tie_group: Some("g".into()),
            },
        ];
        let m = PrunableModel::new(vec!["text".into()], layers).unwrap();
        let mut acc = NormAccumulator::new(&m);
        acc.accumulate("enc", view(1, 2, &[3.0, 0.0])).unwrap();
        acc.accumulate("dec", view(1, 2, &[4.0, 1.0])).unwrap();
        let stats = acc.finalize().unwrap();
        assert_eq!(stats.norms_for(&m, "enc").unwrap(), vec![5.0, 1.0]);
        assert_eq!(stats.norms_for(&m, "dec").unwrap(), vec![5.0, 1.0]);
    }
}
