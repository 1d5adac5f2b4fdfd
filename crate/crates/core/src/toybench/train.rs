//! SGD fine-tuning with an optional frozen mask, and retrieval evaluation.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::PruneMask;

use super::data::SyntheticPairSet;
use super::model::ToyVlm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Per-layer keep flags in the toy model's layer order.
pub type KeepFlags = Vec<Vec<bool>>;

pub fn keep_flags(model: &ToyVlm, mask: &PruneMask) -> Result<KeepFlags> {
    model
        .config
        .layers()
        .iter()
        .zip(&model.weights)
        .map(|(&(name, ..), w)| {
            let m = mask
                .layers
                .get(name)
                .ok_or_else(|| Error::LayerMismatch(format!("mask has no layer '{name}'")))?;
            if m.bits.len() != w.len() {
                return Err(Error::LayerMismatch(format!(
                    "mask for '{name}' has {} entries, layer has {}",
                    m.bits.len(),
                    w.len()
                )));
            }
            Ok(m.bits.iter().map(|&b| b != 0).collect())
        })
        .collect()
}

pub fn apply_flags(model: &mut ToyVlm, flags: &KeepFlags) {
    for (w, keep) in model.weights.iter_mut().zip(flags) {
        for (v, &k) in w.iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ToyVlm,
    pub step: usize,
    pub lr: f64,
    pub rng: ChaCha8Rng,
    pub mask: Option<KeepFlags>,
    velocity: Vec<Vec<f64>>,
    pub last_loss: f64,
}

impl TrainState {
    /// Zeroes masked weights immediately so the invariant holds from step 0.
    pub fn new(mut model: ToyVlm, mask: Option<KeepFlags>, rng: ChaCha8Rng) -> Self {
        if let Some(flags) = &mask {
            apply_flags(&mut model, flags);
        }
        let velocity = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        Self {
            model,
            step: 0,
            lr: 0.0,
            rng,
            mask,
            velocity,
            last_loss: f64::NAN,
        }
    }

    /// One momentum-SGD step on a fresh training batch.
    pub fn step(&mut self, data: &SyntheticPairSet, cfg: &TrainConfig) -> Result<f64> {
        let batch = data.training_batch(&mut self.rng, cfg.batch_size);
        let (loss, grads) = self.model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(self.step));
        }
        self.lr = cfg.lr_at(self.step);
        for (layer, g) in grads.iter().enumerate() {
            let keep = self.mask.as_ref().map(|m| &m[layer]);
            let w = &mut self.model.weights[layer];
            let v = &mut self.velocity[layer];
            for i in 0..w.len() {
                if keep.is_some_and(|k| !k[i]) {
                    continue;
                }
                v[i] = cfg.momentum * v[i] + g[i];
                w[i] -= self.lr * v[i];
            }
        }
        if self.model.weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Diverged(self.step));
        }
        self.step += 1;
        self.last_loss = loss;
        Ok(loss)
    }
}

pub fn train(
    model: ToyVlm,
    mask: Option<KeepFlags>,
    data: &SyntheticPairSet,
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
) -> Result<TrainState> {
    let mut state = TrainState::new(model, mask, rng);
    for _ in 0..cfg.steps {
        state.step(data, cfg)?;
    }
    Ok(state)
}

/// Index of the largest value; the first one on ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Candidates per query.
    pub group_size: usize,
    pub groups: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            group_size: 32,
            groups: 32,
        }
    }
}

/// Mean of text-retrieval and image-retrieval top-1 accuracy on held-out
/// groups of `group_size` matched pairs.
pub fn retrieval_accuracy(model: &ToyVlm, data: &SyntheticPairSet, cfg: &EvalConfig) -> f64 {
    let n = cfg.group_size;
    let mut rng = data.heldout_rng();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    let mut hits = 0usize;
    for _ in 0..cfg.groups {
        let (vision, text) = data.sample(&mut rng, n);
        let (ev, et) = model.embed(&vision, &text, n);
        let logits = model.score_pairs(&ev, &et, &pairs);
        for q in 0..n {
            if argmax((0..n).map(|b| logits[q * n + b])) == q {
                hits += 1;
            }
            if argmax((0..n).map(|a| logits[a * n + q])) == q {
                hits += 1;
            }
        }
    }
    hits as f64 / (2 * n * cfg.groups) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::data::PairSetConfig;
    use crate::toybench::model::ToyConfig;

    fn setup() -> (ToyVlm, SyntheticPairSet) {
        (
            ToyVlm::init(ToyConfig::default(), 0),
            SyntheticPairSet::new(0, PairSetConfig::default()),
        )
    }

    #[test]
    fn zero_model_scores_exact_chance() {
        let (mut m, data) = setup();
        for w in &mut m.weights {
            w.fill(0.0);
        }
        let acc = retrieval_accuracy(&m, &data, &EvalConfig::default());
        assert_eq!(acc, 1.0 / 32.0);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (m, data) = setup();
        let acc = retrieval_accuracy(&m, &data, &EvalConfig::default());
        // 2048 queries: binomial sd at p = 1/32 is about 0.004.
        assert!(acc < 0.2, "accuracy {acc}");
    }

    #[test]
    fn masked_weights_stay_zero_and_all_zero_mask_stays_at_chance() {
        let (m, data) = setup();
        let cfg = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let flags: KeepFlags = m
            .weights
            .iter()
            .map(|w| (0..w.len()).map(|i| i % 3 != 0).collect())
            .collect();
        let mut state = TrainState::new(m.clone(), Some(flags.clone()), data.stream(0));
        for _ in 0..cfg.steps {
            state.step(&data, &cfg).unwrap();
            for (w, keep) in state.model.weights.iter().zip(&flags) {
                assert!(w.iter().zip(keep).all(|(&v, &k)| k || v == 0.0));
            }
        }

        let none: KeepFlags = m.weights.iter().map(|w| vec![false; w.len()]).collect();
        let state = train(m, Some(none), &data, &cfg, data.stream(0)).unwrap();
        assert!(state.model.weights.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(
            retrieval_accuracy(&state.model, &data, &EvalConfig::default()),
            1.0 / 32.0
        );
    }

    #[test]
    fn masked_gradients_are_computed_but_not_applied() {
        let (m, data) = setup();
        let mut flags: KeepFlags = m.weights.iter().map(|w| vec![true; w.len()]).collect();
        flags[7][0] = false;
        let batch = data.training_batch(&mut data.stream(3), 32);
        let mut zeroed = m.clone();
        zeroed.weights[7][0] = 0.0;
        let (_, grads) = zeroed.loss_and_grads(&batch).unwrap();
        assert_ne!(grads[7][0], 0.0);
        let mut state = TrainState::new(m, Some(flags), data.stream(3));
        state.step(&data, &TrainConfig::default()).unwrap();
        assert_eq!(state.model.weights[7][0], 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let (m, data) = setup();
        let cfg = TrainConfig {
            steps: 50,
            lr: 1e12,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(m, None, &data, &cfg, data.stream(0)),
            Err(Error::Diverged(_))
        ));
    }
}
