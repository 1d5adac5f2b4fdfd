//! Synthetic paired data: both modalities are noisy linear views of one
//! shared latent vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::model::ToyBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSetConfig {
    pub d_in: usize,
    pub latent_dim: usize,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
    /// Input features get scales `exp(u)`, `u ~ U(-spread, spread)`.
    pub scale_spread: f64,
}

impl Default for PairSetConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            latent_dim: 16,
            noise: 0.5,
            scale_spread: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPairSet {
    pub seed: u64,
    pub config: PairSetConfig,
    /// `d_in x latent_dim`, row-major.
    a_v: Vec<f64>,
    a_t: Vec<f64>,
    scale_v: Vec<f64>,
    scale_t: Vec<f64>,
}

fn draw_scales(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if spread > 0.0 {
                rng.random_range(-spread..spread).exp()
            } else {
                1.0
            }
        })
        .collect()
}

impl SyntheticPairSet {
    pub fn new(seed: u64, config: PairSetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
        let (d, k) = (config.d_in, config.latent_dim);
        let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).unwrap();
        let draw =
            |rng: &mut ChaCha8Rng| (0..d * k).map(|_| normal.sample(rng)).collect::<Vec<_>>();
        let a_v = draw(&mut rng);
        let a_t = draw(&mut rng);
        let scale_v = draw_scales(&mut rng, d, config.scale_spread);
        let scale_t = draw_scales(&mut rng, d, config.scale_spread);
        Self {
            seed,
            config,
            a_v,
            a_t,
            scale_v,
            scale_t,
        }
    }

    fn view(&self, a: &[f64], scale: &[f64], z: &[f64], rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let k = self.config.latent_dim;
        for (i, s) in scale.iter().enumerate() {
            let clean: f64 = a[i * k..(i + 1) * k]
                .iter()
                .zip(z)
                .map(|(x, y)| x * y)
                .sum();
            let eps: f64 = StandardNormal.sample(rng);
            out.push(s * (clean + self.config.noise * eps));
        }
    }

    /// `n` matched pairs as `(vision, text)`, each `n x d_in` row-major.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.d_in;
        let mut vision = Vec::with_capacity(n * d);
        let mut text = Vec::with_capacity(n * d);
        let mut z = vec![0.0; self.config.latent_dim];
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            self.view(&self.a_v, &self.scale_v, &z, rng, &mut vision);
            self.view(&self.a_t, &self.scale_t, &z, rng, &mut text);
        }
        (vision, text)
    }

    /// Matched pairs only, as fed to calibration.
    pub fn matched_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> ToyBatch {
        let (vision, text) = self.sample(rng, n);
        ToyBatch::matched(n, vision, text)
    }

    /// `n` positives plus one in-batch negative per positive, pairing
    /// vision `i` with a different sample's text.
    pub fn training_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> ToyBatch {
        let (vision, text) = self.sample(rng, n);
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let mut labels = vec![1.0; n];
        if n > 1 {
            for i in 0..n {
                pairs.push((i, (i + rng.random_range(1..n)) % n));
                labels.push(0.0);
            }
        }
        ToyBatch {
            n,
            vision,
            text,
            pairs,
            labels,
        }
    }

    /// Stream for held-out evaluation, disjoint from any training stream
    /// seeded through [`SyntheticPairSet::stream`].
    pub fn heldout_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        rng
    }

    /// Independent sample stream number `id` for this set.
    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        assert!(id < u64::MAX, "stream id reserved for held-out data");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}
