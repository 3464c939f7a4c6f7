//! Proxy embeddings: training the decoder with no real context.
//!
//! Each sentence's empirical unigram distribution is compressed by a
//! bottleneck autoencoder trained with a KL reconstruction loss. The
//! bottleneck activation, perturbed with Gaussian noise and renormalized,
//! stands in for the cue vector; a linear projector lifts it into the
//! decoder's context dimension.
//!
//! The reconstruction KL is computed over the support of the empirical
//! distribution, KL(P || F(P)) = sum_w P(w) ln(P(w)/F(P)(w)), which is the
//! finite direction for sparse targets.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{CueError, Result};
use crate::nn::{Grads, Linear, ParamGroup, ParamStore};
use crate::rng;

/// Sparse empirical unigram distribution of one sentence: exact counts over
/// the vocabulary, entries count/n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnigramDistribution {
    /// (token id, count), sorted by id.
    pub counts: Vec<(u32, u32)>,
    pub total: u32,
}

impl UnigramDistribution {
    pub fn prob(&self, id: u32) -> f64 {
        self.counts
            .iter()
            .find(|(t, _)| *t == id)
            .map(|(_, c)| *c as f64 / self.total as f64)
            .unwrap_or(0.0)
    }

    pub fn iter_probs(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.counts
            .iter()
            .map(|&(t, c)| (t, c as f64 / self.total as f64))
    }

    /// Exact rational invariant: counts sum to the sentence length.
    pub fn count_sum(&self) -> u32 {
        self.counts.iter().map(|&(_, c)| c).sum()
    }
}

/// Exact empirical frequencies of a sentence's tokens.
pub fn unigram_of(tokens: &TokenSequence) -> Result<UnigramDistribution> {
    if tokens.is_empty() {
        return Err(CueError::EmptyInput("unigram of empty sentence".into()));
    }
    let mut counts: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    for &id in &tokens.ids {
        *counts.entry(id).or_insert(0) += 1;
    }
    Ok(UnigramDistribution {
        counts: counts.into_iter().collect(),
        total: tokens.len() as u32,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub bottleneck: usize,
}

impl AutoencoderConfig {
    /// Scaled-down analogue of the |V| x 128 x 16 x 128 x |V| stack.
    pub fn standard(vocab_size: usize) -> Self {
        AutoencoderConfig {
            vocab_size,
            hidden: 128,
            bottleneck: 16,
        }
    }
}

/// Feed-forward bottleneck autoencoder over unigram distributions with
/// ReLU activations and a softmax output.
#[derive(Clone)]
pub struct UnigramAutoencoder {
    pub cfg: AutoencoderConfig,
    pub store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

pub struct AutoencoderBatch {
    h1: Array2<f32>,
    z: Array2<f32>,
    h2: Array2<f32>,
    logits: Array2<f32>,
}

impl UnigramAutoencoder {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "autoencoder-init");
        let g = ParamGroup::Autoencoder;
        let mut store = ParamStore::new();
        let enc1 = Linear::new(&mut store, "enc1", g, cfg.vocab_size, cfg.hidden, true, &mut rng);
        let enc2 = Linear::new(&mut store, "enc2", g, cfg.hidden, cfg.bottleneck, true, &mut rng);
        let dec1 = Linear::new(&mut store, "dec1", g, cfg.bottleneck, cfg.hidden, true, &mut rng);
        let dec2 = Linear::new(&mut store, "dec2", g, cfg.hidden, cfg.vocab_size, true, &mut rng);
        UnigramAutoencoder {
            cfg,
            store,
            enc1,
            enc2,
            dec1,
            dec2,
        }
    }

    /// Sparse-input first layer: h1 = relu(sum_i p_i * W1[id_i] + b1).
    fn encode_hidden(&self, unigrams: &[UnigramDistribution]) -> Array2<f32> {
        let w1 = self.store.p2(self.enc1.w);
        let b1 = self.store.p1(self.enc1.b.unwrap());
        let mut h1 = Array2::<f32>::zeros((unigrams.len(), self.cfg.hidden));
        for (mut row, u) in h1.rows_mut().into_iter().zip(unigrams) {
            for (id, p) in u.iter_probs() {
                let wrow = w1.row(id as usize);
                for (slot, &w) in row.iter_mut().zip(wrow.iter()) {
                    *slot += p as f32 * w;
                }
            }
            row += &b1;
            row.mapv_inplace(|v| v.max(0.0));
        }
        h1
    }

    pub fn forward_batch(&self, unigrams: &[UnigramDistribution]) -> AutoencoderBatch {
        let ps = &self.store;
        let h1 = self.encode_hidden(unigrams);
        let mut z = self.enc2.forward(ps, &h1);
        z.mapv_inplace(|v| v.max(0.0));
        let mut h2 = self.dec1.forward(ps, &z);
        h2.mapv_inplace(|v| v.max(0.0));
        let logits = self.dec2.forward(ps, &h2);
        AutoencoderBatch { h1, z, h2, logits }
    }

    /// Reconstructed distribution rows (softmax over the vocabulary).
    pub fn reconstruct(&self, unigrams: &[UnigramDistribution]) -> Array2<f32> {
        let batch = self.forward_batch(unigrams);
        let mut probs = batch.logits;
        crate::nn::softmax_rows(&mut probs);
        probs
    }

    /// Bottleneck embedding of one sentence (post-activation).
    pub fn bottleneck(&self, unigram: &UnigramDistribution) -> Array1<f32> {
        let batch = self.forward_batch(std::slice::from_ref(unigram));
        batch.z.row(0).to_owned()
    }

    /// Mean reconstruction KL over the batch: sum_support p (ln p - ln q).
    pub fn kl_loss(&self, unigrams: &[UnigramDistribution]) -> f64 {
        let batch = self.forward_batch(unigrams);
        self.kl_of_logits(&batch.logits, unigrams)
    }

    fn kl_of_logits(&self, logits: &Array2<f32>, unigrams: &[UnigramDistribution]) -> f64 {
        let mut total = 0.0f64;
        for (row, u) in logits.rows().into_iter().zip(unigrams) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&x| (x as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            for (id, p) in u.iter_probs() {
                let logq = row[id as usize] as f64 - lse;
                total += p * (p.ln() - logq);
            }
        }
        total / unigrams.len() as f64
    }

    /// Mean KL plus parameter gradients for the batch (gradient of the
    /// mean).
    pub fn train_backward(&self, unigrams: &[UnigramDistribution], grads: &mut Grads) -> f64 {
        let ps = &self.store;
        let batch = self.forward_batch(unigrams);
        let loss = self.kl_of_logits(&batch.logits, unigrams);

        // d(mean KL)/dlogits = (softmax - p) / B
        let mut dlogits = batch.logits.clone();
        crate::nn::softmax_rows(&mut dlogits);
        for (mut row, u) in dlogits.rows_mut().into_iter().zip(unigrams) {
            for (id, p) in u.iter_probs() {
                row[id as usize] -= p as f32;
            }
        }
        let scale = 1.0 / unigrams.len() as f32;
        dlogits.mapv_inplace(|v| v * scale);

        let mut dh2 = self.dec2.backward(ps, &batch.h2, &dlogits, grads);
        relu_mask(&mut dh2, &batch.h2);
        let mut dz = self.dec1.backward(ps, &batch.z, &dh2, grads);
        relu_mask(&mut dz, &batch.z);
        let mut dh1 = self.enc2.backward(ps, &batch.h1, &dz, grads);
        relu_mask(&mut dh1, &batch.h1);

        // sparse backward into enc1
        if grads.is_active(self.enc1.w) {
            let mut dw1 = Array2::<f32>::zeros((self.cfg.vocab_size, self.cfg.hidden));
            for (drow, u) in dh1.rows().into_iter().zip(unigrams) {
                for (id, p) in u.iter_probs() {
                    let mut target = dw1.row_mut(id as usize);
                    for (slot, &d) in target.iter_mut().zip(drow.iter()) {
                        *slot += p as f32 * d;
                    }
                }
            }
            grads.add2(ps, self.enc1.w, dw1);
            grads.add1(ps, self.enc1.b.unwrap(), dh1.sum_axis(Axis(0)));
        }
        loss
    }
}

fn relu_mask(d: &mut Array2<f32>, activated: &Array2<f32>) {
    d.zip_mut_with(activated, |x, &a| {
        if a <= 0.0 {
            *x = 0.0;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Divide by the L2 norm: unit-length proxy (the default reading).
    UnitL2,
    /// Divide by the squared L2 norm, kept for fidelity experiments.
    DivideBySquaredNorm,
}

/// Noisy, normalized bottleneck encoding of the target sentence.
#[derive(Debug, Clone)]
pub struct ProxyEmbedding {
    pub vector: Array1<f32>,
    pub sigma: f32,
}

/// Builds the proxy embedding: bottleneck of the sentence's own unigram
/// distribution, i.i.d. Gaussian noise per coordinate, renormalized.
pub fn make_proxy(
    autoencoder: &UnigramAutoencoder,
    tokens: &TokenSequence,
    sigma: f32,
    mode: NormalizeMode,
    noise_rng: &mut ChaCha8Rng,
) -> Result<ProxyEmbedding> {
    let unigram = unigram_of(tokens)?;
    let mut v = autoencoder.bottleneck(&unigram);
    if sigma > 0.0 {
        for slot in v.iter_mut() {
            *slot += sigma * crate::nn::param::sample_normal(noise_rng);
        }
    }
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm < 1e-12 {
        // degenerate all-zero embedding: fall back to a fixed unit vector
        v.fill(0.0);
        v[0] = 1.0;
    } else {
        match mode {
            NormalizeMode::UnitL2 => v.mapv_inplace(|x| x / norm),
            NormalizeMode::DivideBySquaredNorm => v.mapv_inplace(|x| x / (norm * norm)),
        }
    }
    Ok(ProxyEmbedding { vector: v, sigma })
}

/// Linear map from the bottleneck space into the decoder's context
/// dimension.
#[derive(Clone)]
pub struct ProxyProjector {
    pub store: ParamStore,
    pub in_dim: usize,
    pub out_dim: usize,
    lin: Linear,
}

impl ProxyProjector {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "proxy-projector-init");
        let mut store = ParamStore::new();
        let lin = Linear::new(
            &mut store,
            "proj",
            ParamGroup::ProxyProjector,
            in_dim,
            out_dim,
            true,
            &mut rng,
        );
        ProxyProjector {
            store,
            in_dim,
            out_dim,
            lin,
        }
    }

    pub fn forward(&self, proxy: &Array1<f32>) -> Array1<f32> {
        let row = proxy.view().insert_axis(Axis(0)).to_owned();
        self.lin.forward(&self.store, &row).row(0).to_owned()
    }

    /// Returns the gradient with respect to the proxy vector.
    pub fn backward(
        &self,
        proxy: &Array1<f32>,
        dout: &Array1<f32>,
        grads: &mut Grads,
    ) -> Array1<f32> {
        let row = proxy.view().insert_axis(Axis(0)).to_owned();
        let drow = dout.view().insert_axis(Axis(0)).to_owned();
        self.lin
            .backward(&self.store, &row, &drow, grads)
            .row(0)
            .to_owned()
    }
}

/// Derives the per-visit noise stream for a sentence: fresh noise every
/// epoch, deterministic for a fixed seed.
pub fn proxy_noise_rng(seed: u64, epoch: usize, sentence_key: u64) -> ChaCha8Rng {
    rng::derive_indexed(
        seed,
        "proxy-noise",
        (epoch as u64).wrapping_mul(0x1000001) ^ sentence_key,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unigram_basic_counts() {
        // "a a b" with a=7, b=9
        let u = unigram_of(&TokenSequence::new(vec![7, 7, 9])).unwrap();
        assert_eq!(u.counts, vec![(7, 2), (9, 1)]);
        assert!((u.prob(7) - 2.0 / 3.0).abs() < 1e-12);
        assert!((u.prob(9) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_is_point_mass() {
        let u = unigram_of(&TokenSequence::new(vec![42])).unwrap();
        assert_eq!(u.prob(42), 1.0);
        assert_eq!(u.count_sum(), 1);
    }

    #[test]
    fn empty_sentence_errors() {
        assert!(unigram_of(&TokenSequence::new(vec![])).is_err());
    }

    #[test]
    fn random_sentence_matches_independent_counter() {
        use rand::Rng;
        let mut rng = crate::rng::derive(1, "unigram-test");
        let ids: Vec<u32> = (0..50).map(|_| rng.random_range(0..30)).collect();
        let u = unigram_of(&TokenSequence::new(ids.clone())).unwrap();
        // independent counting pass
        let mut counter = std::collections::HashMap::new();
        for &id in &ids {
            *counter.entry(id).or_insert(0u32) += 1;
        }
        for (id, count) in counter {
            assert_eq!(u.prob(id), count as f64 / 50.0);
        }
        let float_sum: f64 = u.iter_probs().map(|(_, p)| p).sum();
        assert!((float_sum - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn unigram_counts_always_sum_to_length(ids in prop::collection::vec(0u32..100, 1..80)) {
            let u = unigram_of(&TokenSequence::new(ids.clone())).unwrap();
            prop_assert_eq!(u.count_sum() as usize, ids.len());
            let float_sum: f64 = u.iter_probs().map(|(_, p)| p).sum();
            prop_assert!((float_sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn autoencoder_outputs_are_distributions() {
        let ae = UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: 40,
                hidden: 16,
                bottleneck: 4,
            },
            3,
        );
        let unis = vec![
            unigram_of(&TokenSequence::new(vec![5, 5, 9, 12])).unwrap(),
            unigram_of(&TokenSequence::new(vec![7])).unwrap(),
        ];
        let probs = ae.reconstruct(&unis);
        for row in probs.rows() {
            let sum: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn kl_matches_hand_computation_on_toy() {
        // 3-token sentence "a a b" (ids 1, 2) against fixed tiny weights
        let mut ae = UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: 3,
                hidden: 2,
                bottleneck: 2,
            },
            0,
        );
        // fix every parameter to known values
        let ids: Vec<_> = ae.store.ids().collect();
        for id in ids {
            let name = ae.store.meta(id).name.clone();
            let value = match name.as_str() {
                "enc1.w" => ndarray::array![[0.5f32, -0.2], [0.3, 0.8], [-0.1, 0.4]].into_dyn(),
                "enc2.w" | "dec1.w" => ndarray::array![[1.0f32, 0.2], [-0.3, 0.7]].into_dyn(),
                "dec2.w" => ndarray::array![[0.6f32, -0.4, 0.2], [0.1, 0.5, -0.3]].into_dyn(),
                _ => continue, // biases stay zero
            };
            *ae.store.value_mut(id) = value;
        }
        let sentence = TokenSequence::new(vec![1, 1, 2]);
        let u = unigram_of(&sentence).unwrap();
        let loss = ae.kl_loss(std::slice::from_ref(&u));

        // independent f64 recomputation of the whole forward pass
        let p = [0.0f64, 2.0 / 3.0, 1.0 / 3.0];
        let w1 = [[0.5f64, -0.2], [0.3, 0.8], [-0.1, 0.4]];
        let mut h1 = [0.0f64; 2];
        for t in 0..3 {
            for j in 0..2 {
                h1[j] += p[t] * w1[t][j];
            }
        }
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let m = [[1.0f64, 0.2], [-0.3, 0.7]];
        let mut z = [0.0f64; 2];
        for j in 0..2 {
            for i in 0..2 {
                z[j] += h1[i] * m[i][j];
            }
        }
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = [0.0f64; 2];
        for j in 0..2 {
            for i in 0..2 {
                h2[j] += z[i] * m[i][j];
            }
        }
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let w4 = [[0.6f64, -0.4, 0.2], [0.1, 0.5, -0.3]];
        let mut logits = [0.0f64; 3];
        for j in 0..3 {
            for i in 0..2 {
                logits[j] += h2[i] * w4[i][j];
            }
        }
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        let expected: f64 = [(1usize, p[1]), (2, p[2])]
            .iter()
            .map(|&(t, pt)| pt * (pt.ln() - (logits[t] - lse)))
            .sum();
        assert!(
            (loss - expected).abs() < 1e-6,
            "kl {loss} vs hand-computed {expected}"
        );
    }

    #[test]
    fn autoencoder_gradcheck() {
        let mut ae = UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: 12,
                hidden: 6,
                bottleneck: 3,
            },
            7,
        );
        // move ReLU pre-activations decisively away from the kink, where
        // central differences are unreliable
        let ids: Vec<_> = ae.store.ids().collect();
        for id in ids {
            let meta = ae.store.meta(id).clone();
            if meta.shape.len() == 2 {
                let scaled = ae.store.value(id).mapv(|v| v * 20.0);
                *ae.store.value_mut(id) = scaled;
            } else {
                ae.store.value_mut(id).fill(0.25);
            }
        }
        let ae = ae;
        let unis = vec![
            unigram_of(&TokenSequence::new(vec![1, 1, 4, 9])).unwrap(),
            unigram_of(&TokenSequence::new(vec![2, 7, 7])).unwrap(),
        ];
        let mut grads = Grads::new(&ae.store, &ParamGroup::ALL);
        let analytic_loss = {
            let mut ae_mut = ae;
            let _ = &mut ae_mut;
            let loss = ae_mut.train_backward(&unis, &mut grads);
            // directional derivative over all parameters
            use rand::Rng;
            let mut rng = crate::rng::derive(8, "ae-dir");
            let dirs: Vec<ndarray::ArrayD<f32>> = ae_mut
                .store
                .ids()
                .map(|id| ae_mut.store.value(id).mapv(|_| rng.random_range(-1.0f32..1.0)))
                .collect();
            let analytic: f64 = ae_mut
                .store
                .ids()
                .zip(&dirs)
                .filter_map(|(id, u)| {
                    grads.get(id).map(|g| {
                        g.iter()
                            .zip(u.iter())
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                    })
                })
                .sum();
            let h = 1e-3f32;
            let originals: Vec<ndarray::ArrayD<f32>> = ae_mut
                .store
                .ids()
                .map(|id| ae_mut.store.value(id).clone())
                .collect();
            for (id, (orig, u)) in ae_mut.store.ids().zip(originals.iter().zip(&dirs)) {
                *ae_mut.store.value_mut(id) = orig + &u.mapv(|x| x * h);
            }
            let up = ae_mut.kl_loss(&unis);
            for (id, (orig, u)) in ae_mut.store.ids().zip(originals.iter().zip(&dirs)) {
                *ae_mut.store.value_mut(id) = orig - &u.mapv(|x| x * h);
            }
            let down = ae_mut.kl_loss(&unis);
            let numeric = (up - down) / (2.0 * h as f64);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-9);
            assert!(
                rel < 0.05,
                "ae directional: numeric {numeric:.6} vs analytic {analytic:.6}"
            );
            loss
        };
        assert!(analytic_loss > 0.0);
    }

    #[test]
    fn proxy_is_unit_norm_and_deterministic_at_zero_sigma() {
        let ae = UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: 30,
                hidden: 8,
                bottleneck: 4,
            },
            5,
        );
        let sentence = TokenSequence::new(vec![3, 9, 9, 12]);
        for sigma in [0.0f32, 0.3, 2.0, 50.0] {
            let mut rng = proxy_noise_rng(1, 0, 42);
            let p = make_proxy(&ae, &sentence, sigma, NormalizeMode::UnitL2, &mut rng).unwrap();
            let norm: f32 = p.vector.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!(
                (norm - 1.0).abs() < 1e-6,
                "sigma {sigma}: norm {norm} not unit"
            );
        }
        let mut r1 = proxy_noise_rng(1, 0, 42);
        let mut r2 = proxy_noise_rng(1, 0, 42);
        let a = make_proxy(&ae, &sentence, 0.0, NormalizeMode::UnitL2, &mut r1).unwrap();
        let b = make_proxy(&ae, &sentence, 0.0, NormalizeMode::UnitL2, &mut r2).unwrap();
        assert_eq!(a.vector, b.vector, "sigma = 0 must be deterministic");
    }

    #[test]
    fn squared_norm_mode_is_available() {
        let ae = UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: 30,
                hidden: 8,
                bottleneck: 4,
            },
            5,
        );
        let sentence = TokenSequence::new(vec![3, 9, 9, 12]);
        let mut rng = proxy_noise_rng(1, 0, 7);
        let p = make_proxy(
            &ae,
            &sentence,
            0.0,
            NormalizeMode::DivideBySquaredNorm,
            &mut rng,
        )
        .unwrap();
        // dividing by the squared norm yields norm 1/|v|, not 1
        let z = ae.bottleneck(&unigram_of(&sentence).unwrap());
        let orig_norm: f32 = z.iter().map(|x| x * x).sum::<f32>().sqrt();
        let new_norm: f32 = p.vector.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((new_norm - 1.0 / orig_norm).abs() < 1e-5);
    }

    #[test]
    fn huge_noise_destroys_sentence_information() {
        // permutation test: cosine similarity between proxies of the same
        // sentence vs different sentences, at noise 100x the signal scale
        use rand::Rng;
        let ae = UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: 60,
                hidden: 16,
                bottleneck: 8,
            },
            5,
        );
        let mut rng = crate::rng::derive(3, "noise-test");
        let sentences: Vec<TokenSequence> = (0..30)
            .map(|_| {
                TokenSequence::new((0..12).map(|_| rng.random_range(0..60u32)).collect())
            })
            .collect();
        let sigma = 100.0f32;
        let cos = |a: &Array1<f32>, b: &Array1<f32>| -> f64 {
            a.iter().zip(b.iter()).map(|(&x, &y)| (x * y) as f64).sum()
        };
        // paired: same sentence, two independent noise draws
        let mut same: Vec<f64> = Vec::new();
        let mut diff: Vec<f64> = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            let mut ra = proxy_noise_rng(7, 0, i as u64);
            let mut rb = proxy_noise_rng(7, 1, i as u64);
            let a = make_proxy(&ae, s, sigma, NormalizeMode::UnitL2, &mut ra).unwrap();
            let b = make_proxy(&ae, s, sigma, NormalizeMode::UnitL2, &mut rb).unwrap();
            same.push(cos(&a.vector, &b.vector));
            let other = &sentences[(i + 1) % sentences.len()];
            let mut rc = proxy_noise_rng(7, 2, i as u64);
            let c = make_proxy(&ae, other, sigma, NormalizeMode::UnitL2, &mut rc).unwrap();
            diff.push(cos(&a.vector, &c.vector));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let observed = (mean(&same) - mean(&diff)).abs();
        // permutation distribution of the mean difference
        let mut pool: Vec<f64> = same.iter().chain(diff.iter()).copied().collect();
        let mut extreme = 0usize;
        let trials = 400;
        let mut perm_rng = crate::rng::derive(11, "perm");
        for _ in 0..trials {
            use rand::seq::SliceRandom;
            pool.shuffle(&mut perm_rng);
            let (a, b) = pool.split_at(same.len());
            if (mean(a) - mean(b)).abs() >= observed {
                extreme += 1;
            }
        }
        let p_value = extreme as f64 / trials as f64;
        assert!(
            p_value > 0.05,
            "proxies still carry sentence information at huge noise (p = {p_value})"
        );
    }
}
