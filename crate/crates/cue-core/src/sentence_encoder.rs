//! Auto-regressive within-sentence language model.
//!
//! Sentences are framed `<bos> w_1 .. w_n` on the input side and
//! `w_1 .. w_n <eos>` on the target side: EOS is predicted, BOS is not.
//! The pre-softmax hidden states feed the decoder; both the transformer and
//! the recurrent variant expose the same causal contract.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, BOS, EOS, FORBIDDEN_PREDICTIONS, PAD};
use crate::error::{CueError, Result};
use crate::nn::block::BlockCache;
use crate::nn::lstm::LstmLayerCache;
use crate::nn::{
    log_softmax_masked, nll_sum, nll_sum_backward, Embedding, Grads, LayerNorm, Linear, LstmLayer,
    ParamGroup, ParamStore, TransformerBlock,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentenceEncoderVariant {
    Transformer,
    Recurrent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceEncoderConfig {
    pub variant: SentenceEncoderVariant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Tie the output projection to the input embedding table.
    pub tied_head: bool,
}

impl SentenceEncoderConfig {
    /// Desk-scale default.
    pub fn toy(vocab_size: usize) -> Self {
        SentenceEncoderConfig {
            variant: SentenceEncoderVariant::Transformer,
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_mult: 2,
            max_len: 64,
            vocab_size,
            tied_head: false,
        }
    }

    /// Production-scale preset (not intended for desk runs).
    pub fn paper_scale(vocab_size: usize) -> Self {
        SentenceEncoderConfig {
            variant: SentenceEncoderVariant::Transformer,
            layers: 6,
            dim: 512,
            heads: 4,
            ffn_mult: 1,
            max_len: 512,
            vocab_size,
            tied_head: true,
        }
    }

    pub fn recurrent_toy(vocab_size: usize) -> Self {
        SentenceEncoderConfig {
            variant: SentenceEncoderVariant::Recurrent,
            layers: 2,
            dim: 128,
            heads: 1,
            ffn_mult: 1,
            max_len: 64,
            vocab_size,
            tied_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == SentenceEncoderVariant::Transformer && self.dim % self.heads != 0 {
            return Err(CueError::InvalidConfig(format!(
                "model dimension {} not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.dim == 0 || self.max_len == 0 {
            return Err(CueError::InvalidConfig(
                "layers, dim and max_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count (no allocation).
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let v = self.vocab_size;
        match self.variant {
            SentenceEncoderVariant::Transformer => {
                let f = d * self.ffn_mult;
                let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
                let head = if self.tied_head { 0 } else { d * v + v };
                v * d + self.max_len * d + self.layers * per_layer + 2 * d + head
            }
            SentenceEncoderVariant::Recurrent => {
                let mut total = v * d;
                let mut in_dim = d;
                for _ in 0..self.layers {
                    total += 4 * d * (in_dim + d + 1);
                    in_dim = d;
                }
                total + d * v + v
            }
        }
    }
}

/// Per-position hidden vectors (pre-softmax) and next-token log
/// probabilities.
#[derive(Debug, Clone)]
pub struct SentenceStates {
    pub hidden: Array2<f32>,
    pub logprobs: Array2<f32>,
}

#[derive(Clone)]
enum Body {
    Transformer {
        pos: Embedding,
        blocks: Vec<TransformerBlock>,
        final_ln: LayerNorm,
    },
    Recurrent {
        layers: Vec<LstmLayer>,
    },
}

#[derive(Clone)]
enum Head {
    Tied,
    Linear(Linear),
}

#[derive(Clone)]
pub struct SentenceEncoder {
    pub cfg: SentenceEncoderConfig,
    pub store: ParamStore,
    emb: Embedding,
    body: Body,
    head: Head,
}

pub enum EncoderCache {
    Transformer {
        blocks: Vec<BlockCache>,
        ln: crate::nn::layernorm::LayerNormCache,
    },
    Recurrent {
        layers: Vec<LstmLayerCache>,
    },
}

impl SentenceEncoder {
    pub fn new(cfg: SentenceEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::derive(seed, "sentence-encoder-init");
        let group = ParamGroup::SentenceEncoder;
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", group, cfg.vocab_size, cfg.dim, &mut rng);
        let body = match cfg.variant {
            SentenceEncoderVariant::Transformer => Body::Transformer {
                pos: Embedding::new(&mut store, "pos", group, cfg.max_len, cfg.dim, &mut rng),
                blocks: (0..cfg.layers)
                    .map(|i| {
                        TransformerBlock::new(
                            &mut store,
                            &format!("block{i}"),
                            group,
                            cfg.dim,
                            cfg.heads,
                            cfg.dim * cfg.ffn_mult,
                            false,
                            &mut rng,
                        )
                    })
                    .collect(),
                final_ln: LayerNorm::new(&mut store, "final_ln", group, cfg.dim, &mut rng),
            },
            SentenceEncoderVariant::Recurrent => Body::Recurrent {
                layers: (0..cfg.layers)
                    .map(|i| {
                        LstmLayer::new(
                            &mut store,
                            &format!("lstm{i}"),
                            group,
                            cfg.dim,
                            cfg.dim,
                            &mut rng,
                        )
                    })
                    .collect(),
            },
        };
        let head = if cfg.tied_head {
            Head::Tied
        } else {
            Head::Linear(Linear::new(
                &mut store,
                "head",
                group,
                cfg.dim,
                cfg.vocab_size,
                true,
                &mut rng,
            ))
        };
        Ok(SentenceEncoder {
            cfg,
            store,
            emb,
            body,
            head,
        })
    }

    /// Hidden states for `<bos> w_1 .. w_n` input ids, with the caches
    /// needed for a backward pass.
    pub fn states_with_cache(&self, ids: &[u32]) -> Result<(Array2<f32>, EncoderCache)> {
        if ids.len() > self.cfg.max_len {
            return Err(CueError::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        if ids.is_empty() {
            return Err(CueError::EmptyInput("sentence".into()));
        }
        let ps = &self.store;
        match &self.body {
            Body::Transformer {
                pos,
                blocks,
                final_ln,
            } => {
                let positions: Vec<u32> = (0..ids.len() as u32).collect();
                let mut x = self.emb.forward(ps, ids);
                x += &pos.forward(ps, &positions);
                let mut caches = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let (y, cache) = block.forward(ps, &x, None, true);
                    x = y;
                    caches.push(cache);
                }
                let (hidden, ln_cache) = final_ln.forward(ps, &x);
                Ok((
                    hidden,
                    EncoderCache::Transformer {
                        blocks: caches,
                        ln: ln_cache,
                    },
                ))
            }
            Body::Recurrent { layers } => {
                let mut x = self.emb.forward(ps, ids);
                let mut caches = Vec::with_capacity(layers.len());
                for layer in layers {
                    let (y, cache) = layer.forward(ps, &x);
                    x = y;
                    caches.push(cache);
                }
                Ok((x, EncoderCache::Recurrent { layers: caches }))
            }
        }
    }

    /// Hidden states only, for frozen use by the decoder.
    pub fn states(&self, ids: &[u32]) -> Result<Array2<f32>> {
        Ok(self.states_with_cache(ids)?.0)
    }

    /// Vocabulary projection weights as (dim, vocab) plus bias, for
    /// decoder warm starts.
    pub fn head_weights(&self) -> (Array2<f32>, Option<ndarray::Array1<f32>>) {
        match &self.head {
            Head::Tied => (self.store.p2(self.emb.table).t().to_owned(), None),
            Head::Linear(lin) => (
                self.store.p2(lin.w).to_owned(),
                lin.b.map(|b| self.store.p1(b).to_owned()),
            ),
        }
    }

    pub fn logits(&self, hidden: &Array2<f32>) -> Array2<f32> {
        match &self.head {
            Head::Tied => hidden.dot(&self.store.p2(self.emb.table).t()),
            Head::Linear(lin) => lin.forward(&self.store, hidden),
        }
    }

    /// Full per-position log-probability matrix for `<bos> ..` input.
    pub fn encode_sentence(&self, ids: &[u32]) -> Result<SentenceStates> {
        let (hidden, _) = self.states_with_cache(ids)?;
        let logits = self.logits(&hidden);
        let logprobs = log_softmax_masked(&logits, &FORBIDDEN_PREDICTIONS);
        Ok(SentenceStates { hidden, logprobs })
    }

    /// Evaluation path: NLL sum and scored-token count for one sentence.
    pub fn nll(&self, ids: &[u32], targets: &[u32]) -> Result<(f64, usize)> {
        let (hidden, _) = self.states_with_cache(ids)?;
        let logits = self.logits(&hidden);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        Ok(nll_sum(&logits, targets, &score, &FORBIDDEN_PREDICTIONS))
    }

    /// Training path: NLL sum for the sentence plus full backward through
    /// head, body and embeddings.
    pub fn train_backward(
        &self,
        ids: &[u32],
        targets: &[u32],
        grads: &mut Grads,
    ) -> Result<(f64, usize)> {
        let (hidden, cache) = self.states_with_cache(ids)?;
        let logits = self.logits(&hidden);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let (total, count, dlogits) =
            nll_sum_backward(&logits, targets, &score, &FORBIDDEN_PREDICTIONS);
        let dhidden = match &self.head {
            Head::Tied => {
                let dhidden = dlogits.dot(&self.store.p2(self.emb.table));
                if grads.is_active(self.emb.table) {
                    grads.add2(&self.store, self.emb.table, dlogits.t().dot(&hidden));
                }
                dhidden
            }
            Head::Linear(lin) => lin.backward(&self.store, &hidden, &dlogits, grads),
        };
        self.backward_from_states(ids, &cache, &dhidden, grads);
        Ok((total, count))
    }


    /// Batched training: encoder bodies run per sentence, the vocabulary
    /// projection and its backward run as one matrix product over the
    /// concatenated states.
    pub fn train_backward_batch(
        &self,
        items: &[(Vec<u32>, Vec<u32>)],
        grads: &mut Grads,
    ) -> Result<(f64, usize)> {
        if items.is_empty() {
            return Ok((0.0, 0));
        }
        let mut bodies = Vec::with_capacity(items.len());
        let mut rows = 0usize;
        for (ids, _) in items {
            let (hidden, cache) = self.states_with_cache(ids)?;
            rows += hidden.nrows();
            bodies.push((hidden, cache));
        }
        let mut big = Array2::<f32>::zeros((rows, self.cfg.dim));
        let mut targets = Vec::with_capacity(rows);
        let mut offset = 0usize;
        for ((hidden, _), (_, t)) in bodies.iter().zip(items) {
            big.slice_mut(ndarray::s![offset..offset + hidden.nrows(), ..])
                .assign(hidden);
            targets.extend_from_slice(t);
            offset += hidden.nrows();
        }
        let logits = self.logits(&big);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let (total, count, dlogits) =
            nll_sum_backward(&logits, &targets, &score, &FORBIDDEN_PREDICTIONS);
        let dbig = match &self.head {
            Head::Tied => {
                let dhidden = dlogits.dot(&self.store.p2(self.emb.table));
                if grads.is_active(self.emb.table) {
                    grads.add2(&self.store, self.emb.table, dlogits.t().dot(&big));
                }
                dhidden
            }
            Head::Linear(lin) => lin.backward(&self.store, &big, &dlogits, grads),
        };
        let mut offset = 0usize;
        for ((hidden, cache), (ids, _)) in bodies.iter().zip(items) {
            let n = hidden.nrows();
            let slice = dbig.slice(ndarray::s![offset..offset + n, ..]).to_owned();
            self.backward_from_states(ids, cache, &slice, grads);
            offset += n;
        }
        Ok((total, count))
    }

    /// Batched evaluation NLL over several sentences.
    pub fn nll_batch(&self, items: &[(Vec<u32>, Vec<u32>)]) -> Result<(f64, usize)> {
        if items.is_empty() {
            return Ok((0.0, 0));
        }
        let mut states = Vec::with_capacity(items.len());
        let mut rows = 0usize;
        for (ids, _) in items {
            let h = self.states(ids)?;
            rows += h.nrows();
            states.push(h);
        }
        let mut big = Array2::<f32>::zeros((rows, self.cfg.dim));
        let mut targets = Vec::with_capacity(rows);
        let mut offset = 0usize;
        for (h, (_, t)) in states.iter().zip(items) {
            big.slice_mut(ndarray::s![offset..offset + h.nrows(), ..]).assign(h);
            targets.extend_from_slice(t);
            offset += h.nrows();
        }
        let logits = self.logits(&big);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        Ok(nll_sum(&logits, &targets, &score, &FORBIDDEN_PREDICTIONS))
    }

    /// Backward pass from a gradient on the hidden states.
    pub fn backward_from_states(
        &self,
        ids: &[u32],
        cache: &EncoderCache,
        dhidden: &Array2<f32>,
        grads: &mut Grads,
    ) {
        let ps = &self.store;
        match (&self.body, cache) {
            (
                Body::Transformer {
                    pos,
                    blocks,
                    final_ln,
                },
                EncoderCache::Transformer { blocks: caches, ln },
            ) => {
                let mut dx = final_ln.backward(ps, ln, dhidden, grads);
                for (block, cache) in blocks.iter().zip(caches).rev() {
                    let (d, _) = block.backward(ps, cache, None, &dx, grads);
                    dx = d;
                }
                let positions: Vec<u32> = (0..ids.len() as u32).collect();
                pos.backward(ps, &positions, &dx, grads);
                self.emb.backward(ps, ids, &dx, grads);
            }
            (Body::Recurrent { layers }, EncoderCache::Recurrent { layers: caches }) => {
                let mut dx = dhidden.clone();
                for (layer, cache) in layers.iter().zip(caches).rev() {
                    dx = layer.backward(ps, cache, &dx, grads);
                }
                self.emb.backward(ps, ids, &dx, grads);
            }
            _ => unreachable!("cache variant matches body variant"),
        }
    }
}

/// Prepends BOS to a token sequence: the encoder input framing.
pub fn with_bos(tokens: &TokenSequence) -> Vec<u32> {
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(&tokens.ids);
    ids
}

/// Shifted targets: `w_1 .. w_n <eos>`.
pub fn targets_of(tokens: &TokenSequence) -> Vec<u32> {
    let mut t = tokens.ids.clone();
    t.push(EOS);
    t
}

/// Mean NLL of `targets` under precomputed states; PAD targets are excluded
/// from the mean.
pub fn lm_loss(states: &SentenceStates, targets: &[u32]) -> Result<f64> {
    if states.logprobs.nrows() != targets.len() {
        return Err(CueError::ShapeMismatch(format!(
            "states have {} positions, targets {}",
            states.logprobs.nrows(),
            targets.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (row, &t) in states.logprobs.rows().into_iter().zip(targets) {
        if t == PAD {
            continue;
        }
        total -= row[t as usize] as f64;
        count += 1;
    }
    if count == 0 {
        return Err(CueError::EmptyInput("all targets are PAD".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn tiny_encoder(variant: SentenceEncoderVariant) -> SentenceEncoder {
        let cfg = SentenceEncoderConfig {
            variant,
            layers: 2,
            dim: 32,
            heads: 4,
            ffn_mult: 2,
            max_len: 32,
            vocab_size: 200,
            tied_head: false,
        };
        SentenceEncoder::new(cfg, 7).unwrap()
    }

    #[test]
    fn causality_is_bitwise_for_earlier_positions() {
        for variant in [
            SentenceEncoderVariant::Transformer,
            SentenceEncoderVariant::Recurrent,
        ] {
            let enc = tiny_encoder(variant);
            let a = vec![BOS, 9, 17, 33, 41, 56];
            let mut b = a.clone();
            b[4] = 77; // perturb position 4; positions <= 3 must be identical
            let sa = enc.encode_sentence(&a).unwrap();
            let sb = enc.encode_sentence(&b).unwrap();
            for i in 0..4 {
                for j in 0..enc.cfg.dim {
                    assert_eq!(
                        sa.hidden[[i, j]].to_bits(),
                        sb.hidden[[i, j]].to_bits(),
                        "{variant:?} hidden differs at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn prefix_equality_within_tolerance() {
        let enc = tiny_encoder(SentenceEncoderVariant::Transformer);
        let full = vec![BOS, 5, 6, 7, 8, 9, 10];
        let sf = enc.encode_sentence(&full).unwrap();
        for p in 1..full.len() {
            let sp = enc.encode_sentence(&full[..p]).unwrap();
            for i in 0..p {
                for j in 0..enc.cfg.dim {
                    let d = (sp.hidden[[i, j]] - sf.hidden[[i, j]]).abs();
                    assert!(d <= 1e-5, "prefix {p} row {i} differs by {d}");
                }
            }
        }
    }

    #[test]
    fn empty_sentence_has_one_state() {
        let enc = tiny_encoder(SentenceEncoderVariant::Transformer);
        let states = enc.encode_sentence(&[BOS]).unwrap();
        assert_eq!(states.hidden.nrows(), 1);
        assert_eq!(states.logprobs.nrows(), 1);
        let sum: f64 = states
            .logprobs
            .row(0)
            .iter()
            .map(|&x| (x as f64).exp())
            .sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn too_long_input_errors() {
        let enc = tiny_encoder(SentenceEncoderVariant::Transformer);
        let ids = vec![5u32; enc.cfg.max_len + 1];
        assert!(matches!(
            enc.encode_sentence(&ids),
            Err(CueError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let enc = tiny_encoder(SentenceEncoderVariant::Transformer);
        let mut rng = crate::rng::derive(3, "rand-text");
        use rand::Rng;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for _ in 0..40 {
            let n = rng.random_range(4..12);
            let tokens = TokenSequence::new(
                (0..n)
                    .map(|_| rng.random_range(5..enc.cfg.vocab_size as u32))
                    .collect(),
            );
            let (nll, c) = enc.nll(&with_bos(&tokens), &targets_of(&tokens)).unwrap();
            total += nll;
            count += c;
        }
        let ppl = (total / count as f64).exp();
        let v = enc.cfg.vocab_size as f64;
        assert!(
            (ppl - v).abs() / v < 0.02,
            "untrained PPL {ppl:.1} not within 2% of |V| = {v}"
        );
    }

    #[test]
    fn forced_certainty_gives_zero_loss() {
        let n = 3;
        let v = 11;
        let targets = vec![4u32, 7, 2];
        let mut logprobs = Array2::<f32>::from_elem((n, v), f32::NEG_INFINITY);
        for (i, &t) in targets.iter().enumerate() {
            logprobs[[i, t as usize]] = 0.0;
        }
        let states = SentenceStates {
            hidden: Array2::zeros((n, 4)),
            logprobs,
        };
        assert_eq!(lm_loss(&states, &targets).unwrap(), 0.0);
    }

    #[test]
    fn uniform_model_loss_is_ln_vocab() {
        let n = 5;
        let v = 64usize;
        let lp = -(v as f32).ln();
        let states = SentenceStates {
            hidden: Array2::zeros((n, 4)),
            logprobs: Array2::from_elem((n, v), lp),
        };
        let loss = lm_loss(&states, &vec![3u32; n]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn three_token_chain_rule_matches_hand_computation() {
        // fixed logits; expected NLL accumulated independently in f64
        let logits = ndarray::array![
            [0.3f32, -1.0, 2.0, 0.1, 0.0, 1.5, -0.7],
            [1.0, 1.0, -2.0, 0.5, 0.2, 0.0, 0.3],
            [-0.2, 0.8, 0.1, 2.2, -1.1, 0.4, 0.9],
        ];
        let targets = [2u32, 5, 3];
        let mut expected = 0.0f64;
        for (row, &t) in logits.rows().into_iter().zip(&targets) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&x| ((x as f64) - m).exp()).sum::<f64>().ln();
            expected += lse - row[t as usize] as f64;
        }
        expected /= 3.0;

        let logprobs = log_softmax_masked(&logits, &[]);
        let states = SentenceStates {
            hidden: Array2::zeros((3, 2)),
            logprobs,
        };
        let loss = lm_loss(&states, &targets).unwrap();
        assert!(
            (loss - expected).abs() < 1e-6,
            "loss {loss} vs hand-computed {expected}"
        );
    }

    #[test]
    fn length_mismatch_errors() {
        let states = SentenceStates {
            hidden: Array2::zeros((2, 4)),
            logprobs: Array2::from_elem((2, 8), -(8f32).ln()),
        };
        assert!(matches!(
            lm_loss(&states, &[1, 2, 3]),
            Err(CueError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn logprob_rows_normalize() {
        let enc = tiny_encoder(SentenceEncoderVariant::Recurrent);
        let states = enc.encode_sentence(&[BOS, 10, 20, 30]).unwrap();
        for row in states.logprobs.rows() {
            let sum: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn toy_and_paper_param_counts() {
        let toy = SentenceEncoderConfig::toy(5000);
        let enc = SentenceEncoder::new(toy.clone(), 0).unwrap();
        assert_eq!(enc.store.total_len(), toy.param_count());

        let paper = SentenceEncoderConfig::paper_scale(28996);
        let count = paper.param_count() as f64;
        let target = 24.5e6;
        assert!(
            (count - target).abs() / target < 0.15,
            "paper-scale sentence encoder has {count:.2e} params, want 24.5M +/- 15%"
        );
    }

    #[test]
    fn vocab_helper_round_trip() {
        let vocab = Vocabulary::build(["alpha beta gamma"], 32, 1).unwrap();
        let toks = TokenSequence::new(vocab.encode("alpha gamma", 8));
        let ids = with_bos(&toks);
        assert_eq!(ids[0], BOS);
        let targets = targets_of(&toks);
        assert_eq!(*targets.last().unwrap(), EOS);
        assert_eq!(ids.len(), targets.len());
    }
}
