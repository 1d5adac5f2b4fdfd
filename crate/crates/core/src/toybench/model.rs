//! Two-tower toy model: vision and text MLP towers feeding a fusion head
//! that scores (image, text) pairs. All layers are bias-free linear maps
//! followed by ReLU, except the final match-score projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calibration::NormAccumulator;
use crate::error::{Error, Result};
use crate::matrix::MatrixView;
use crate::modelspec::{LayerConfig, LayerSpec, ModelSpecConfig, PrunableModel};
use crate::tensorstore::{DenseTensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub embed: usize,
    pub fusion_hidden: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 64,
            embed: 32,
            fusion_hidden: 64,
        }
    }
}

impl ToyConfig {
    /// Tiny variant used for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            d_in: 4,
            hidden: 4,
            embed: 4,
            fusion_hidden: 4,
        }
    }

    /// `(name, modality, depth, out_dim, in_dim)` for every layer.
    pub fn layers(&self) -> [(&'static str, &'static str, usize, usize, usize); 8] {
        let (d, h, e, f) = (self.d_in, self.hidden, self.embed, self.fusion_hidden);
        [
            ("vision.0", "vision", 0, h, d),
            ("vision.1", "vision", 1, h, h),
            ("vision.2", "vision", 2, e, h),
            ("text.0", "text", 0, h, d),
            ("text.1", "text", 1, h, h),
            ("text.2", "text", 2, e, h),
            ("fusion.0", "fusion", 0, f, 2 * e),
            ("fusion.1", "fusion", 1, 1, f),
        ]
    }

    pub fn model_spec_config(&self) -> ModelSpecConfig {
        ModelSpecConfig {
            modalities: vec!["vision".into(), "text".into(), "fusion".into()],
            layers: self
                .layers()
                .iter()
                .map(|&(name, modality, depth, _, _)| LayerConfig {
                    name: name.into(),
                    modality: modality.into(),
                    depth_index: Some(depth),
                    tie_group: None,
                })
                .collect(),
        }
    }

    pub fn prunable_model(&self) -> PrunableModel {
        let layers = self
            .layers()
            .iter()
            .map(|&(name, modality, depth, out_dim, in_dim)| LayerSpec {
                name: name.into(),
                out_dim,
                in_dim,
                modality: modality.into(),
                depth_index: depth,
                tie_group: None,
            })
            .collect();
        PrunableModel::new(
            vec!["vision".into(), "text".into(), "fusion".into()],
            layers,
        )
        .expect("toy topology is valid")
    }
}

const VISION: usize = 0;
const TEXT: usize = 3;
const FUSION0: usize = 6;
const FUSION1: usize = 7;
pub const NUM_LAYERS: usize = 8;

/// A batch of paired inputs plus the (vision, text) index pairs to score.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub n: usize,
    /// `n x d_in` row-major.
    pub vision: Vec<f64>,
    /// `n x d_in` row-major.
    pub text: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
}

impl ToyBatch {
    /// Matched pairs only, all labelled positive.
    pub fn matched(n: usize, vision: Vec<f64>, text: Vec<f64>) -> Self {
        Self {
            n,
            vision,
            text,
            pairs: (0..n).map(|i| (i, i)).collect(),
            labels: vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone)]
struct TowerCache {
    /// Input of each of the three layers.
    inputs: [Vec<f64>; 3],
    out: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    vision: TowerCache,
    text: TowerCache,
    fused: Vec<f64>,
    fusion_hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    pub config: ToyConfig,
    /// Row-major `out x in` weights, in [`ToyConfig::layers`] order.
    pub weights: Vec<Vec<f64>>,
}

/// `y = act(x W^T)` for `x: n x in`, `w: out x in`.
fn linear(x: &[f64], n: usize, w: &[f64], out: usize, inp: usize, relu: bool) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        let xi = &x[i * inp..(i + 1) * inp];
        let yi = &mut y[i * out..(i + 1) * out];
        for (j, yj) in yi.iter_mut().enumerate() {
            let wj = &w[j * inp..(j + 1) * inp];
            let s: f64 = xi.iter().zip(wj).map(|(a, b)| a * b).sum();
            *yj = if relu { s.max(0.0) } else { s };
        }
    }
    y
}

/// Accumulates `dW += dy^T x` and returns `dx = dy W` when requested.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    out: usize,
    inp: usize,
    dy: &[f64],
    dw: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let mut dx = if want_dx {
        vec![0.0; n * inp]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let xi = &x[i * inp..(i + 1) * inp];
        for j in 0..out {
            let g = dy[i * out + j];
            if g == 0.0 {
                continue;
            }
            for (d, &a) in dw[j * inp..(j + 1) * inp].iter_mut().zip(xi) {
                *d += g * a;
            }
            if want_dx {
                for (d, &b) in dx[i * inp..(i + 1) * inp]
                    .iter_mut()
                    .zip(&w[j * inp..(j + 1) * inp])
                {
                    *d += g * b;
                }
            }
        }
    }
    dx
}

fn relu_mask(dy: &mut [f64], post: &[f64]) {
    for (g, &p) in dy.iter_mut().zip(post) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ToyVlm {
    /// He-normal initialization from `seed`.
    pub fn init(config: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = config
            .layers()
            .iter()
            .map(|&(_, _, _, out, inp)| {
                let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).unwrap();
                (0..out * inp).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        Self { config, weights }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    fn shape(&self, layer: usize) -> (usize, usize) {
        let l = self.config.layers()[layer];
        (l.3, l.4)
    }

    /// Rounds every weight to the nearest f32, as a checkpoint round trip would.
    pub fn round_to_f32(&mut self) {
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn to_checkpoint(&self) -> TensorMap {
        let mut tm = TensorMap::new();
        for (w, &(name, _, _, out, inp)) in self.weights.iter().zip(self.config.layers().iter()) {
            let data = w.iter().map(|&v| v as f32).collect();
            tm.insert(
                name,
                DenseTensor::f32(vec![out, inp], data).expect("shape matches"),
            );
        }
        tm
    }

    pub fn from_checkpoint(config: ToyConfig, tm: &TensorMap) -> Result<Self> {
        let weights = config
            .layers()
            .iter()
            .map(|&(name, _, _, out, inp)| {
                let t = tm
                    .get(name)
                    .ok_or_else(|| Error::MissingTensor(name.into()))?;
                let view = MatrixView::from_tensor(name, t)?;
                if (view.rows(), view.cols()) != (out, inp) {
                    return Err(Error::ShapeMismatch {
                        name: name.into(),
                        detail: format!("expected [{out}, {inp}], found {:?}", t.shape()),
                    });
                }
                Ok(view.data().iter().map(|&v| f64::from(v)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, weights })
    }

    /// Infers the toy dimensions from a checkpoint's tensor shapes.
    pub fn config_from_checkpoint(tm: &TensorMap) -> Result<ToyConfig> {
        let shape = |name: &str| -> Result<(usize, usize)> {
            let t = tm
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.into()))?;
            match t.shape() {
                &[o, i] => Ok((o, i)),
                other => Err(Error::ShapeMismatch {
                    name: name.into(),
                    detail: format!("expected 2-D, found {other:?}"),
                }),
            }
        };
        let (hidden, d_in) = shape("vision.0")?;
        let (embed, _) = shape("vision.2")?;
        let (fusion_hidden, _) = shape("fusion.0")?;
        Ok(ToyConfig {
            d_in,
            hidden,
            embed,
            fusion_hidden,
        })
    }

    fn check_batch(&self, batch: &ToyBatch) -> Result<()> {
        let want = batch.n * self.config.d_in;
        if batch.vision.len() != want || batch.text.len() != want {
            return Err(Error::ShapeMismatch {
                name: "toy batch".into(),
                detail: format!(
                    "expected {} x {} inputs per tower, got {} and {}",
                    batch.n,
                    self.config.d_in,
                    batch.vision.len(),
                    batch.text.len()
                ),
            });
        }
        if batch
            .pairs
            .iter()
            .any(|&(a, b)| a >= batch.n || b >= batch.n)
            || batch.labels.len() != batch.pairs.len()
        {
            return Err(Error::InvalidArgument(
                "pair indices or labels out of range".into(),
            ));
        }
        Ok(())
    }

    fn tower(&self, base: usize, x: &[f64], n: usize) -> TowerCache {
        let mut inputs: [Vec<f64>; 3] = Default::default();
        let mut cur = x.to_vec();
        for (k, slot) in inputs.iter_mut().enumerate() {
            let (out, inp) = self.shape(base + k);
            let next = linear(&cur, n, &self.weights[base + k], out, inp, true);
            *slot = std::mem::replace(&mut cur, next);
        }
        TowerCache { inputs, out: cur }
    }

    /// Embeddings of both towers, each `n x embed`.
    pub fn embed(&self, vision: &[f64], text: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.tower(VISION, vision, n).out,
            self.tower(TEXT, text, n).out,
        )
    }

    /// Match logits for `pairs` given precomputed embeddings.
    pub fn score_pairs(&self, ev: &[f64], et: &[f64], pairs: &[(usize, usize)]) -> Vec<f64> {
        let fused = self.fuse(ev, et, pairs);
        let (fh, fin) = self.shape(FUSION0);
        let hidden = linear(&fused, pairs.len(), &self.weights[FUSION0], fh, fin, true);
        linear(&hidden, pairs.len(), &self.weights[FUSION1], 1, fh, false)
    }

    fn fuse(&self, ev: &[f64], et: &[f64], pairs: &[(usize, usize)]) -> Vec<f64> {
        let e = self.config.embed;
        let mut fused = Vec::with_capacity(pairs.len() * 2 * e);
        for &(a, b) in pairs {
            fused.extend_from_slice(&ev[a * e..(a + 1) * e]);
            fused.extend_from_slice(&et[b * e..(b + 1) * e]);
        }
        fused
    }

    pub fn forward(&self, batch: &ToyBatch) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let vision = self.tower(VISION, &batch.vision, batch.n);
        let text = self.tower(TEXT, &batch.text, batch.n);
        let fused = self.fuse(&vision.out, &text.out, &batch.pairs);
        let p = batch.pairs.len();
        let (fh, fin) = self.shape(FUSION0);
        let fusion_hidden = linear(&fused, p, &self.weights[FUSION0], fh, fin, true);
        let logits = linear(&fusion_hidden, p, &self.weights[FUSION1], 1, fh, false);
        Ok(ForwardCache {
            vision,
            text,
            fused,
            fusion_hidden,
            logits,
        })
    }

    /// Feeds every prunable layer's input rows to `acc`.
    pub fn record_activations(&self, batch: &ToyBatch, acc: &mut NormAccumulator) -> Result<()> {
        let cache = self.forward(batch)?;
        let layers = self.config.layers();
        let mut feed = |layer: usize, rows: usize, data: &[f64]| -> Result<()> {
            let as_f32: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            acc.accumulate(
                layers[layer].0,
                MatrixView::new(rows, layers[layer].4, &as_f32)?,
            )
        };
        for k in 0..3 {
            feed(VISION + k, batch.n, &cache.vision.inputs[k])?;
            feed(TEXT + k, batch.n, &cache.text.inputs[k])?;
        }
        let p = batch.pairs.len();
        feed(FUSION0, p, &cache.fused)?;
        feed(FUSION1, p, &cache.fusion_hidden)?;
        Ok(())
    }

    /// Mean binary cross-entropy of the match logits.
    pub fn loss(&self, batch: &ToyBatch) -> Result<f64> {
        let cache = self.forward(batch)?;
        Ok(bce(&cache.logits, &batch.labels))
    }

    /// Loss and exact gradient of every weight.
    pub fn loss_and_grads(&self, batch: &ToyBatch) -> Result<(f64, Vec<Vec<f64>>)> {
        let cache = self.forward(batch)?;
        let loss = bce(&cache.logits, &batch.labels);
        let p = batch.pairs.len();
        let mut grads: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();

        let dlogit: Vec<f64> = cache
            .logits
            .iter()
            .zip(&batch.labels)
            .map(|(&z, &y)| (sigmoid(z) - y) / p as f64)
            .collect();
        let (fh, fin) = self.shape(FUSION0);
        let mut dhidden = linear_backward(
            &cache.fusion_hidden,
            p,
            &self.weights[FUSION1],
            1,
            fh,
            &dlogit,
            &mut grads[FUSION1],
            true,
        );
        relu_mask(&mut dhidden, &cache.fusion_hidden);
        let dfused = linear_backward(
            &cache.fused,
            p,
            &self.weights[FUSION0],
            fh,
            fin,
            &dhidden,
            &mut grads[FUSION0],
            true,
        );

        let e = self.config.embed;
        let mut dev = vec![0.0; batch.n * e];
        let mut det = vec![0.0; batch.n * e];
        for (q, &(a, b)) in batch.pairs.iter().enumerate() {
            let row = &dfused[q * 2 * e..(q + 1) * 2 * e];
            for (d, g) in dev[a * e..(a + 1) * e].iter_mut().zip(&row[..e]) {
                *d += g;
            }
            for (d, g) in det[b * e..(b + 1) * e].iter_mut().zip(&row[e..]) {
                *d += g;
            }
        }
        self.tower_backward(VISION, &cache.vision, batch.n, dev, &mut grads);
        self.tower_backward(TEXT, &cache.text, batch.n, det, &mut grads);
        Ok((loss, grads))
    }

    fn tower_backward(
        &self,
        base: usize,
        cache: &TowerCache,
        n: usize,
        mut dy: Vec<f64>,
        grads: &mut [Vec<f64>],
    ) {
        let mut post = &cache.out;
        for k in (0..3).rev() {
            relu_mask(&mut dy, post);
            let (out, inp) = self.shape(base + k);
            let dx = linear_backward(
                &cache.inputs[k],
                n,
                &self.weights[base + k],
                out,
                inp,
                &dy,
                &mut grads[base + k],
                k > 0,
            );
            dy = dx;
            post = &cache.inputs[k];
        }
    }
}

fn bce(logits: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum();
    total / logits.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_batch() -> ToyBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 4;
        let mut draw = || {
            (0..n * 4)
                .map(|_| normal.sample(&mut rng))
                .collect::<Vec<f64>>()
        };
        let vision = draw();
        let text = draw();
        ToyBatch {
            n,
            vision,
            text,
            pairs: vec![
                (0, 0),
                (1, 1),
                (2, 2),
                (3, 3),
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 0),
            ],
            labels: vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn zero_input_gives_zero_preactivations() {
        let m = ToyVlm::init(ToyConfig::default(), 0);
        let x = vec![0.0; 32];
        let y = linear(&x, 1, &m.weights[0], 64, 32, false);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_layer_is_linear_in_input() {
        let m = ToyVlm::init(ToyConfig::default(), 0);
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y = linear(&x, 1, &m.weights[0], 64, 32, false);
        let y2 = linear(&x2, 1, &m.weights[0], 64, 32, false);
        for (a, b) in y.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = ToyVlm::init(ToyConfig::micro(), 3);
        m.round_to_f32();
        let ck = m.to_checkpoint();
        assert_eq!(
            ToyVlm::config_from_checkpoint(&ck).unwrap(),
            ToyConfig::micro()
        );
        assert_eq!(ToyVlm::from_checkpoint(ToyConfig::micro(), &ck).unwrap(), m);
        assert_eq!(
            m.param_count(),
            ToyConfig::micro().prunable_model().global_param_count
        );
    }

    #[test]
    fn default_model_is_desk_scale() {
        assert!(ToyConfig::default().prunable_model().global_param_count <= 50_000);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = ToyVlm::init(ToyConfig::micro(), 0);
        let batch = ToyBatch::matched(1, vec![0.0; 3], vec![0.0; 4]);
        assert!(m.forward(&batch).is_err());
    }

    #[test]
    fn recording_counts_rows_per_tower() {
        let m = ToyVlm::init(ToyConfig::micro(), 0);
        let model = ToyConfig::micro().prunable_model();
        let mut acc = NormAccumulator::new(&model);
        let b = micro_batch();
        let matched = ToyBatch::matched(b.n, b.vision.clone(), b.text.clone());
        m.record_activations(&matched, &mut acc).unwrap();
        assert_eq!(acc.token_count(), 4);
        m.record_activations(&matched, &mut acc).unwrap();
        assert_eq!(acc.token_count(), 8);
        acc.finalize().unwrap().validate(&model).unwrap();
    }

    #[test]
    fn saturated_correct_logits_have_vanishing_gradients() {
        let mut m = ToyVlm::init(ToyConfig::micro(), 5);
        for w in &mut m.weights {
            for v in w.iter_mut() {
                *v = v.abs() * 4.0;
            }
        }
        let b = micro_batch();
        let positives: Vec<f64> = b.vision.iter().map(|v| v.abs()).collect();
        let text: Vec<f64> = b.text.iter().map(|v| v.abs()).collect();
        let batch = ToyBatch::matched(b.n, positives, text);
        let (loss, grads) = m.loss_and_grads(&batch).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(grads.iter().flatten().all(|g| g.abs() < 1e-9));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradients_match_central_differences() {
        let m = ToyVlm::init(ToyConfig::micro(), 1);
        let batch = micro_batch();
        let (_, grads) = m.loss_and_grads(&batch).unwrap();
        let h = 1e-3;
        let mut worst = 0.0f64;
        for layer in 0..NUM_LAYERS {
            for i in 0..m.weights[layer].len() {
                let mut plus = m.clone();
                plus.weights[layer][i] += h;
                let mut minus = m.clone();
                minus.weights[layer][i] -= h;
                let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
                worst = worst.max(rel_err(fd, grads[layer][i]));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
