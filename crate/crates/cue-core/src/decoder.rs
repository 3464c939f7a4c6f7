//! Masked transformer decoder fusing sentence states with the cue vector.
//!
//! The decoder consumes the sentence encoder's pre-softmax states as its
//! sequence input (the BOS state provides the shift) and attends to the cue
//! vector as a single-entry cross-attention memory. Two ablation variants
//! share the interface: concatenation fusion (no transformer stack, cue
//! vector concatenated with each state before the logit layer) and a
//! fusion-free stack that never sees context.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{FORBIDDEN_PREDICTIONS, PAD};
use crate::error::{CueError, Result};
use crate::nn::block::BlockCache;
use crate::nn::{
    log_softmax_masked, nll_sum, nll_sum_backward, Embedding, Grads, LayerNorm, Linear,
    ParamGroup, ParamStore, TransformerBlock,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    CrossAttention,
    ConcatLogit,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Dimension of the sentence-encoder states consumed as input.
    pub state_dim: usize,
    pub fusion: FusionMode,
}

impl DecoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        DecoderConfig {
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_mult: 1,
            max_len: 64,
            vocab_size,
            state_dim: 128,
            fusion: FusionMode::CrossAttention,
        }
    }

    pub fn paper_scale(vocab_size: usize) -> Self {
        DecoderConfig {
            layers: 6,
            dim: 512,
            heads: 4,
            ffn_mult: 4,
            max_len: 512,
            vocab_size,
            state_dim: 512,
            fusion: FusionMode::CrossAttention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion != FusionMode::ConcatLogit
            && (self.layers == 0 || self.dim % self.heads != 0)
        {
            return Err(CueError::InvalidConfig(
                "decoder needs layers >= 1 and dim divisible by heads".into(),
            ));
        }
        Ok(())
    }
}

/// Per-position next-token log probabilities, conditioned on exactly one
/// cue vector for the whole sentence.
#[derive(Debug, Clone)]
pub struct ContextualPrediction {
    pub logprobs: Array2<f32>,
}

#[derive(Clone)]
enum DecoderBody {
    /// Transformer stack; blocks carry cross-attention only in
    /// cross-attention fusion mode.
    Stack {
        in_proj: Linear,
        pos: Embedding,
        blocks: Vec<TransformerBlock>,
        final_ln: LayerNorm,
        head: Linear,
    },
    /// Concatenation fusion: a single logit layer over [state; cue].
    Concat { head: Linear },
}

#[derive(Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub store: ParamStore,
    body: DecoderBody,
}

pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    ln: Option<crate::nn::layernorm::LayerNormCache>,
    hidden: Array2<f32>,
    /// Concat fusion input rows [state; cue].
    concat_input: Option<Array2<f32>>,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::derive(seed, "decoder-init");
        let group = ParamGroup::Decoder;
        let mut store = ParamStore::new();
        let body = match cfg.fusion {
            FusionMode::ConcatLogit => DecoderBody::Concat {
                head: Linear::new(
                    &mut store,
                    "concat_head",
                    group,
                    cfg.state_dim + cfg.dim,
                    cfg.vocab_size,
                    true,
                    &mut rng,
                ),
            },
            _ => DecoderBody::Stack {
                in_proj: Linear::new(
                    &mut store,
                    "in_proj",
                    group,
                    cfg.state_dim,
                    cfg.dim,
                    true,
                    &mut rng,
                ),
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
                            cfg.fusion == FusionMode::CrossAttention,
                            &mut rng,
                        )
                    })
                    .collect(),
                final_ln: LayerNorm::new(&mut store, "final_ln", group, cfg.dim, &mut rng),
                head: Linear::new(
                    &mut store,
                    "head",
                    group,
                    cfg.dim,
                    cfg.vocab_size,
                    true,
                    &mut rng,
                ),
            },
        };
        Ok(Decoder { cfg, store, body })
    }


    /// Warm start: copies the sentence encoder's vocabulary projection into
    /// the decoder head and sets the input projection to identity, so an
    /// untrained decoder starts near the no-context model and training
    /// spends its steps on context fusion rather than relearning the LM.
    pub fn warm_start_from(&mut self, encoder: &crate::sentence_encoder::SentenceEncoder) -> Result<()> {
        if encoder.cfg.dim != self.cfg.state_dim {
            return Err(CueError::ShapeMismatch(format!(
                "encoder dim {} vs decoder state dim {}",
                encoder.cfg.dim, self.cfg.state_dim
            )));
        }
        let (head_w, head_b) = encoder.head_weights();
        match &self.body {
            DecoderBody::Concat { head } => {
                if head_w.ncols() != self.cfg.vocab_size {
                    return Err(CueError::ShapeMismatch("vocabulary mismatch".into()));
                }
                // state half of the concat head takes the encoder head
                let mut w = self.store.p2(head.w).to_owned();
                w.slice_mut(ndarray::s![..self.cfg.state_dim, ..]).assign(&head_w);
                let w_id = head.w;
                let b_id = head.b;
                self.store.set2(w_id, w);
                if let (Some(b), Some(src)) = (b_id, head_b.as_ref()) {
                    self.store.set1(b, src.clone());
                }
            }
            DecoderBody::Stack { in_proj, head, .. } => {
                if head_w.ncols() != self.cfg.vocab_size {
                    return Err(CueError::ShapeMismatch("vocabulary mismatch".into()));
                }
                let mut eye = Array2::<f32>::zeros((self.cfg.state_dim, self.cfg.dim));
                for i in 0..self.cfg.state_dim.min(self.cfg.dim) {
                    eye[[i, i]] = 1.0;
                }
                let in_w = in_proj.w;
                let in_b = in_proj.b;
                let head_w_id = head.w;
                let head_b_id = head.b;
                self.store.set2(in_w, eye);
                if let Some(b) = in_b {
                    let dim = self.cfg.dim;
                    self.store.set1(b, ndarray::Array1::zeros(dim));
                }
                self.store.set2(head_w_id, head_w);
                if let (Some(b), Some(src)) = (head_b_id, head_b) {
                    self.store.set1(b, src);
                }
            }
        }
        Ok(())
    }

    fn check_shapes(&self, states: &Array2<f32>, e_cue: Option<&Array1<f32>>) -> Result<()> {
        if states.ncols() != self.cfg.state_dim {
            return Err(CueError::ShapeMismatch(format!(
                "states dim {} vs configured {}",
                states.ncols(),
                self.cfg.state_dim
            )));
        }
        if states.nrows() > self.cfg.max_len {
            return Err(CueError::SequenceTooLong {
                len: states.nrows(),
                max: self.cfg.max_len,
            });
        }
        if let Some(e) = e_cue {
            if e.len() != self.cfg.dim {
                return Err(CueError::ShapeMismatch(format!(
                    "cue vector dim {} vs configured {}",
                    e.len(),
                    self.cfg.dim
                )));
            }
        }
        Ok(())
    }

    /// Logits for the fused (states, cue) input. `use_fusion` = false runs
    /// the fusion-free path (cross-attention sublayers skipped entirely).
    fn forward(
        &self,
        states: &Array2<f32>,
        e_cue: Option<&Array1<f32>>,
        use_fusion: bool,
    ) -> Result<(Array2<f32>, DecoderCache)> {
        let (body_out, cache) = self.body_forward(states, e_cue, use_fusion)?;
        let logits = self.head_linear().forward(&self.store, &body_out);
        Ok((logits, cache))
    }

    fn head_linear(&self) -> &Linear {
        match &self.body {
            DecoderBody::Concat { head } => head,
            DecoderBody::Stack { head, .. } => head,
        }
    }

    /// The representation rows feeding the logit layer: final hidden states
    /// for the transformer stack, `[state; cue]` rows for concat fusion.
    fn body_forward(
        &self,
        states: &Array2<f32>,
        e_cue: Option<&Array1<f32>>,
        use_fusion: bool,
    ) -> Result<(Array2<f32>, DecoderCache)> {
        self.check_shapes(states, e_cue)?;
        let ps = &self.store;
        match &self.body {
            DecoderBody::Concat { head } => {
                let e = e_cue.ok_or_else(|| {
                    CueError::ShapeMismatch("concat fusion requires a cue vector".into())
                })?;
                let n = states.nrows();
                let mut cat = Array2::<f32>::zeros((n, self.cfg.state_dim + self.cfg.dim));
                for (i, row) in states.rows().into_iter().enumerate() {
                    let mut target = cat.row_mut(i);
                    target
                        .slice_mut(ndarray::s![..self.cfg.state_dim])
                        .assign(&row);
                    target.slice_mut(ndarray::s![self.cfg.state_dim..]).assign(e);
                }
                Ok((
                    cat.clone(),
                    DecoderCache {
                        blocks: Vec::new(),
                        ln: None,
                        hidden: Array2::zeros((0, 0)),
                        concat_input: Some(cat),
                    },
                ))
            }
            DecoderBody::Stack {
                in_proj,
                pos,
                blocks,
                final_ln,
                head,
            } => {
                let memory = match (use_fusion, e_cue) {
                    (true, Some(e)) => Some(e.view().insert_axis(Axis(0)).to_owned()),
                    _ => None,
                };
                let positions: Vec<u32> = (0..states.nrows() as u32).collect();
                let mut x = in_proj.forward(ps, states);
                x += &pos.forward(ps, &positions);
                let mut caches = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let (y, cache) = block.forward_opt_cross(ps, &x, memory.as_ref(), true);
                    x = y;
                    caches.push(cache);
                }
                let (hidden, ln_cache) = final_ln.forward(ps, &x);
                let _ = head;
                Ok((
                    hidden.clone(),
                    DecoderCache {
                        blocks: caches,
                        ln: Some(ln_cache),
                        hidden,
                        concat_input: None,
                    },
                ))
            }
        }
    }

    fn uses_fusion(&self) -> bool {
        self.cfg.fusion == FusionMode::CrossAttention
    }

    /// Contextual next-token distributions. In fusion mode `none` the cue
    /// vector is ignored.
    pub fn decode(
        &self,
        states: &Array2<f32>,
        e_cue: &Array1<f32>,
    ) -> Result<ContextualPrediction> {
        let (logits, _) = self.forward(states, Some(e_cue), self.uses_fusion())?;
        Ok(ContextualPrediction {
            logprobs: log_softmax_masked(&logits, &FORBIDDEN_PREDICTIONS),
        })
    }

    /// The fusion-free path of the same parameters: cross-attention
    /// sublayers are skipped entirely.
    pub fn decode_without_fusion(&self, states: &Array2<f32>) -> Result<ContextualPrediction> {
        let (logits, _) = self.forward(states, None, false)?;
        Ok(ContextualPrediction {
            logprobs: log_softmax_masked(&logits, &FORBIDDEN_PREDICTIONS),
        })
    }

    /// Evaluation: NLL sum over non-PAD targets.
    pub fn nll(
        &self,
        states: &Array2<f32>,
        e_cue: &Array1<f32>,
        targets: &[u32],
    ) -> Result<(f64, usize)> {
        let (logits, _) = self.forward(states, Some(e_cue), self.uses_fusion())?;
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        Ok(nll_sum(&logits, targets, &score, &FORBIDDEN_PREDICTIONS))
    }

    /// Training: NLL sum plus backward; returns gradients with respect to
    /// the input states and the cue vector.
    pub fn train_backward(
        &self,
        states: &Array2<f32>,
        e_cue: &Array1<f32>,
        targets: &[u32],
        grads: &mut Grads,
    ) -> Result<(f64, usize, Array2<f32>, Array1<f32>)> {
        let (body_out, cache) = self.body_forward(states, Some(e_cue), self.uses_fusion())?;
        let logits = self.head_linear().forward(&self.store, &body_out);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let (total, count, dlogits) =
            nll_sum_backward(&logits, targets, &score, &FORBIDDEN_PREDICTIONS);
        let dbody = self
            .head_linear()
            .backward(&self.store, &body_out, &dlogits, grads);
        let (dstates, d_e_cue) = self.body_backward(states, e_cue, &cache, &dbody, grads);
        Ok((total, count, dstates, d_e_cue))
    }

    fn body_backward(
        &self,
        states: &Array2<f32>,
        e_cue: &Array1<f32>,
        cache: &DecoderCache,
        dbody: &Array2<f32>,
        grads: &mut Grads,
    ) -> (Array2<f32>, Array1<f32>) {
        let ps = &self.store;
        match &self.body {
            DecoderBody::Concat { .. } => {
                let dstates = dbody.slice(ndarray::s![.., ..self.cfg.state_dim]).to_owned();
                let d_e_cue = dbody
                    .slice(ndarray::s![.., self.cfg.state_dim..])
                    .sum_axis(Axis(0));
                (dstates, d_e_cue)
            }
            DecoderBody::Stack {
                in_proj,
                pos,
                blocks,
                final_ln,
                ..
            } => {
                let memory = self
                    .uses_fusion()
                    .then(|| e_cue.view().insert_axis(Axis(0)).to_owned());
                let mut dx = final_ln.backward(ps, cache.ln.as_ref().unwrap(), dbody, grads);
                let mut d_e_cue = Array1::<f32>::zeros(self.cfg.dim);
                for (block, bc) in blocks.iter().zip(&cache.blocks).rev() {
                    let (d, dmem) = block.backward(ps, bc, memory.as_ref(), &dx, grads);
                    dx = d;
                    if let Some(dmem) = dmem {
                        d_e_cue += &dmem.row(0);
                    }
                }
                let positions: Vec<u32> = (0..states.nrows() as u32).collect();
                pos.backward(ps, &positions, &dx, grads);
                let dstates = in_proj.backward(ps, states, &dx, grads);
                (dstates, d_e_cue)
            }
        }
    }

    /// Batched training across sentences: bodies run per item, the logit
    /// layer runs once over concatenated rows. Returns the cue-vector
    /// gradient per item.
    pub fn train_backward_batch(
        &self,
        items: &[(Array2<f32>, Array1<f32>, Vec<u32>)],
        grads: &mut Grads,
    ) -> Result<(f64, usize, Vec<Array1<f32>>)> {
        if items.is_empty() {
            return Ok((0.0, 0, Vec::new()));
        }
        let mut bodies = Vec::with_capacity(items.len());
        let mut rows = 0usize;
        for (states, e_cue, _) in items {
            let (body_out, cache) = self.body_forward(states, Some(e_cue), self.uses_fusion())?;
            rows += body_out.nrows();
            bodies.push((body_out, cache));
        }
        let width = bodies[0].0.ncols();
        let mut big = Array2::<f32>::zeros((rows, width));
        let mut targets: Vec<u32> = Vec::with_capacity(rows);
        let mut offset = 0usize;
        for ((body_out, _), (_, _, t)) in bodies.iter().zip(items) {
            big.slice_mut(ndarray::s![offset..offset + body_out.nrows(), ..])
                .assign(body_out);
            targets.extend_from_slice(t);
            offset += body_out.nrows();
        }
        let logits = self.head_linear().forward(&self.store, &big);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let (total, count, dlogits) =
            nll_sum_backward(&logits, &targets, &score, &FORBIDDEN_PREDICTIONS);
        let dbig = self.head_linear().backward(&self.store, &big, &dlogits, grads);
        let mut d_cues = Vec::with_capacity(items.len());
        let mut offset = 0usize;
        for ((body_out, cache), (states, e_cue, _)) in bodies.iter().zip(items) {
            let n = body_out.nrows();
            let dbody = dbig.slice(ndarray::s![offset..offset + n, ..]).to_owned();
            let (_, d_e_cue) = self.body_backward(states, e_cue, cache, &dbody, grads);
            d_cues.push(d_e_cue);
            offset += n;
        }
        Ok((total, count, d_cues))
    }

    /// Batched evaluation NLL.
    pub fn nll_batch(&self, items: &[(Array2<f32>, Array1<f32>, Vec<u32>)]) -> Result<(f64, usize)> {
        if items.is_empty() {
            return Ok((0.0, 0));
        }
        let mut bodies = Vec::with_capacity(items.len());
        let mut rows = 0usize;
        for (states, e_cue, _) in items {
            let (body_out, _) = self.body_forward(states, Some(e_cue), self.uses_fusion())?;
            rows += body_out.nrows();
            bodies.push(body_out);
        }
        let width = bodies[0].ncols();
        let mut big = Array2::<f32>::zeros((rows, width));
        let mut targets: Vec<u32> = Vec::with_capacity(rows);
        let mut offset = 0usize;
        for (body_out, (_, _, t)) in bodies.iter().zip(items) {
            big.slice_mut(ndarray::s![offset..offset + body_out.nrows(), ..])
                .assign(body_out);
            targets.extend_from_slice(t);
            offset += body_out.nrows();
        }
        let logits = self.head_linear().forward(&self.store, &big);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        Ok(nll_sum(&logits, &targets, &score, &FORBIDDEN_PREDICTIONS))
    }
}

/// Contextual next-token distributions under concatenation fusion; same
/// contract as [`Decoder::decode`] for a `ConcatLogit` decoder.
pub fn decode_concat(
    decoder: &Decoder,
    states: &Array2<f32>,
    e_cue: &Array1<f32>,
) -> Result<ContextualPrediction> {
    if decoder.cfg.fusion != FusionMode::ConcatLogit {
        return Err(CueError::InvalidConfig(
            "decode_concat requires a concat-logit decoder".into(),
        ));
    }
    decoder.decode(states, e_cue)
}

/// Context-only predictor: one distribution from the cue vector, repeated
/// at every position (no sentence-internal information).
#[derive(Clone)]
pub struct ContextOnlyHead {
    pub store: ParamStore,
    pub dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    l1: Linear,
    l2: Linear,
}

impl ContextOnlyHead {
    pub fn new(dim: usize, hidden: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "context-only-init");
        let mut store = ParamStore::new();
        let group = ParamGroup::Decoder;
        let l1 = Linear::new(&mut store, "l1", group, dim, hidden, true, &mut rng);
        let l2 = Linear::new(&mut store, "l2", group, hidden, vocab_size, true, &mut rng);
        ContextOnlyHead {
            store,
            dim,
            hidden,
            vocab_size,
            l1,
            l2,
        }
    }

    fn logits_row(&self, e_cue: &Array1<f32>) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
        let ps = &self.store;
        let input = e_cue.view().insert_axis(Axis(0)).to_owned();
        let mut hidden = self.l1.forward(ps, &input);
        hidden.mapv_inplace(|v| v.max(0.0));
        let logits = self.l2.forward(ps, &hidden);
        (logits, hidden, input)
    }

    /// The same distribution at every one of `n` positions.
    pub fn context_only_decode(&self, e_cue: &Array1<f32>, n: usize) -> ContextualPrediction {
        let (logits, _, _) = self.logits_row(e_cue);
        let row = log_softmax_masked(&logits, &FORBIDDEN_PREDICTIONS);
        let mut out = Array2::<f32>::zeros((n, self.vocab_size));
        for mut r in out.rows_mut() {
            r.assign(&row.row(0));
        }
        ContextualPrediction { logprobs: out }
    }


    /// Batched training over sentences: each row of the batch carries one
    /// sentence's cue vector; the per-sentence NLL is count * lse minus the
    /// summed target logits, so the logit layer runs once.
    pub fn train_backward_batch(
        &self,
        items: &[(Array1<f32>, Vec<u32>)],
        grads: &mut Grads,
    ) -> (f64, usize, Vec<Array1<f32>>) {
        if items.is_empty() {
            return (0.0, 0, Vec::new());
        }
        let ps = &self.store;
        let b = items.len();
        let mut input = Array2::<f32>::zeros((b, self.dim));
        for (mut row, (e, _)) in input.rows_mut().into_iter().zip(items) {
            row.assign(e);
        }
        let mut hidden = self.l1.forward(ps, &input);
        hidden.mapv_inplace(|v| v.max(0.0));
        let logits = self.l2.forward(ps, &hidden);

        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
        for (i, (_, targets)) in items.iter().enumerate() {
            let row = logits.row(i);
            let mut max = f32::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if FORBIDDEN_PREDICTIONS.contains(&(j as u32)) {
                    continue;
                }
                if x > max {
                    max = x;
                }
            }
            let mut sum = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                if FORBIDDEN_PREDICTIONS.contains(&(j as u32)) {
                    continue;
                }
                sum += (x - max).exp() as f64;
            }
            let lse = max as f64 + sum.ln();
            let mut scored = 0usize;
            let mut target_logit_sum = 0.0f64;
            let mut drow = dlogits.row_mut(i);
            for &t in targets {
                if t == PAD {
                    continue;
                }
                scored += 1;
                target_logit_sum += row[t as usize] as f64;
                drow[t as usize] -= 1.0;
            }
            total += scored as f64 * lse - target_logit_sum;
            count += scored;
            let denom = sum as f32;
            for (j, &x) in row.iter().enumerate() {
                if FORBIDDEN_PREDICTIONS.contains(&(j as u32)) {
                    continue;
                }
                drow[j] += scored as f32 * (x - max).exp() / denom;
            }
        }

        let mut dhidden = self.l2.backward(ps, &hidden, &dlogits, grads);
        dhidden.zip_mut_with(&hidden, |d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        let dinput = self.l1.backward(ps, &input, &dhidden, grads);
        let d_cues = dinput.rows().into_iter().map(|r| r.to_owned()).collect();
        (total, count, d_cues)
    }

    /// Batched evaluation NLL.
    pub fn nll_batch(&self, items: &[(Array1<f32>, Vec<u32>)]) -> (f64, usize) {
        if items.is_empty() {
            return (0.0, 0);
        }
        let ps = &self.store;
        let b = items.len();
        let mut input = Array2::<f32>::zeros((b, self.dim));
        for (mut row, (e, _)) in input.rows_mut().into_iter().zip(items) {
            row.assign(e);
        }
        let mut hidden = self.l1.forward(ps, &input);
        hidden.mapv_inplace(|v| v.max(0.0));
        let logits = self.l2.forward(ps, &hidden);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, (_, targets)) in items.iter().enumerate() {
            let row = logits.row(i);
            let mut max = f32::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if FORBIDDEN_PREDICTIONS.contains(&(j as u32)) {
                    continue;
                }
                if x > max {
                    max = x;
                }
            }
            let mut sum = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                if FORBIDDEN_PREDICTIONS.contains(&(j as u32)) {
                    continue;
                }
                sum += (x - max).exp() as f64;
            }
            let lse = max as f64 + sum.ln();
            for &t in targets {
                if t == PAD {
                    continue;
                }
                total += lse - row[t as usize] as f64;
                count += 1;
            }
        }
        (total, count)
    }

    pub fn nll(&self, e_cue: &Array1<f32>, targets: &[u32]) -> (f64, usize) {
        let (logits, _, _) = self.logits_row(e_cue);
        let expanded = expand_targets(&logits, targets);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        nll_sum(&expanded, targets, &score, &FORBIDDEN_PREDICTIONS)
    }

    pub fn train_backward(
        &self,
        e_cue: &Array1<f32>,
        targets: &[u32],
        grads: &mut Grads,
    ) -> (f64, usize, Array1<f32>) {
        let (logits, hidden, input) = self.logits_row(e_cue);
        let expanded = expand_targets(&logits, targets);
        let score: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let (total, count, dlogits) =
            nll_sum_backward(&expanded, targets, &score, &FORBIDDEN_PREDICTIONS);
        // all positions share one logits row
        let drow = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
        let ps = &self.store;
        let mut dhidden = self.l2.backward(ps, &hidden, &drow, grads);
        dhidden.row_mut(0).zip_mut_with(&hidden.row(0), |d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        let dinput = self.l1.backward(ps, &input, &dhidden, grads);
        (total, count, dinput.row(0).to_owned())
    }
}

fn expand_targets(logits_row: &Array2<f32>, targets: &[u32]) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((targets.len(), logits_row.ncols()));
    for mut r in out.rows_mut() {
        r.assign(&logits_row.row(0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_states(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = crate::rng::derive(seed, "dec-states");
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0))
    }

    fn rand_cue(d: usize, seed: u64) -> Array1<f32> {
        let mut rng = crate::rng::derive(seed, "dec-cue");
        Array1::from_shape_fn(d, |_| rng.random_range(-1.0f32..1.0))
    }

    fn cfg(fusion: FusionMode) -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            vocab_size: 50,
            state_dim: 16,
            fusion,
        }
    }

    #[test]
    fn fusion_none_ignores_cue() {
        let dec = Decoder::new(cfg(FusionMode::None), 3).unwrap();
        let states = rand_states(5, 16, 1);
        let a = dec.decode(&states, &rand_cue(16, 2)).unwrap();
        let b = dec.decode(&states, &rand_cue(16, 99)).unwrap();
        assert_eq!(a.logprobs, b.logprobs, "cue must not influence output");
    }

    #[test]
    fn decoder_is_causal_in_states() {
        for fusion in [FusionMode::CrossAttention, FusionMode::None] {
            let dec = Decoder::new(cfg(fusion), 3).unwrap();
            let cue = rand_cue(16, 2);
            let a = rand_states(6, 16, 1);
            let mut b = a.clone();
            for j in 0..16 {
                b[[4, j]] += 0.5; // perturb position 4
            }
            let pa = dec.decode(&a, &cue).unwrap();
            let pb = dec.decode(&b, &cue).unwrap();
            for i in 0..4 {
                for v in 0..50 {
                    assert_eq!(
                        pa.logprobs[[i, v]],
                        pb.logprobs[[i, v]],
                        "{fusion:?}: row {i} changed"
                    );
                }
            }
        }
    }

    #[test]
    fn zeroed_cross_projection_equals_fusion_free_path() {
        let mut dec = Decoder::new(cfg(FusionMode::CrossAttention), 3).unwrap();
        // zero every cross-attention output projection (weights and bias)
        let ids: Vec<_> = dec.store.ids().collect();
        for id in ids {
            if dec.store.meta(id).name.contains(".cross.wo") {
                dec.store.value_mut(id).fill(0.0);
            }
        }
        let states = rand_states(5, 16, 4);
        let cue = rand_cue(16, 5);
        let fused = dec.decode(&states, &cue).unwrap();
        let free = dec.decode_without_fusion(&states).unwrap();
        assert_eq!(fused.logprobs, free.logprobs);
    }

    #[test]
    fn concat_rows_normalize() {
        let dec = Decoder::new(cfg(FusionMode::ConcatLogit), 3).unwrap();
        let pred = decode_concat(&dec, &rand_states(4, 16, 7), &rand_cue(16, 8)).unwrap();
        for row in pred.logprobs.rows() {
            let sum: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
            assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
        }
    }

    #[test]
    fn concat_with_zeroed_context_half_is_a_pure_state_head() {
        let mut dec = Decoder::new(cfg(FusionMode::ConcatLogit), 3).unwrap();
        let ids: Vec<_> = dec.store.ids().collect();
        for id in ids {
            if dec.store.meta(id).name == "concat_head.w" {
                // zero the rows that read the cue half
                let mut w = dec.store.p2(id).to_owned();
                for i in 16..32 {
                    w.row_mut(i).fill(0.0);
                }
                dec.store.set2(id, w);
            }
        }
        let states = rand_states(4, 16, 9);
        let a = decode_concat(&dec, &states, &rand_cue(16, 10)).unwrap();
        let b = decode_concat(&dec, &states, &Array1::zeros(16)).unwrap();
        assert_eq!(a.logprobs, b.logprobs, "context half must be inert");
    }

    #[test]
    fn context_only_rows_are_identical() {
        let head = ContextOnlyHead::new(16, 32, 50, 3);
        let pred = head.context_only_decode(&rand_cue(16, 11), 6);
        assert_eq!(pred.logprobs.nrows(), 6);
        for i in 1..6 {
            for v in 0..50 {
                assert_eq!(pred.logprobs[[0, v]], pred.logprobs[[i, v]]);
            }
        }
        let sum: f64 = pred.logprobs.row(0).iter().map(|&x| (x as f64).exp()).sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatches_error() {
        let dec = Decoder::new(cfg(FusionMode::CrossAttention), 3).unwrap();
        assert!(dec.decode(&rand_states(4, 8, 1), &rand_cue(16, 2)).is_err());
        assert!(dec.decode(&rand_states(4, 16, 1), &rand_cue(8, 2)).is_err());
        let long = rand_states(17, 16, 1);
        assert!(matches!(
            dec.decode(&long, &rand_cue(16, 2)),
            Err(CueError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn backward_reaches_cue_and_states() {
        for fusion in [FusionMode::CrossAttention, FusionMode::ConcatLogit] {
            let dec = Decoder::new(cfg(fusion), 3).unwrap();
            let states = rand_states(5, 16, 12);
            let cue = rand_cue(16, 13);
            let targets = vec![7u32, 9, 11, 13, 2];
            let mut grads = Grads::new(&dec.store, &ParamGroup::ALL);
            let (total, count, dstates, dcue) = dec
                .train_backward(&states, &cue, &targets, &mut grads)
                .unwrap();
            assert!(total > 0.0);
            assert_eq!(count, 5);
            assert!(dstates.iter().any(|&x| x != 0.0));
            assert!(
                dcue.iter().any(|&x| x != 0.0),
                "{fusion:?}: no gradient reached the cue vector"
            );
        }
    }

    #[test]
    fn cue_gradient_matches_directional_derivative() {
        let dec = Decoder::new(cfg(FusionMode::CrossAttention), 3).unwrap();
        let states = rand_states(5, 16, 14);
        let cue = rand_cue(16, 15);
        let targets = vec![7u32, 9, 11, 13, 2];
        let mut grads = Grads::new(&dec.store, &ParamGroup::ALL);
        let (_, _, _, dcue) = dec
            .train_backward(&states, &cue, &targets, &mut grads)
            .unwrap();
        let mut rng = crate::rng::derive(16, "dec-dir");
        let u = Array1::from_shape_fn(16, |_| rng.random_range(-1.0f32..1.0));
        let analytic: f64 = dcue
            .iter()
            .zip(u.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let h = 1e-2f32;
        let loss_at = |cue: &Array1<f32>| -> f64 {
            let (nll, _) = dec.nll(&states, cue, &targets).unwrap();
            nll
        };
        let up = loss_at(&(&cue + &u.mapv(|x| x * h)));
        let down = loss_at(&(&cue - &u.mapv(|x| x * h)));
        let numeric = (up - down) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        assert!(rel < 0.1, "numeric {numeric:.5} vs analytic {analytic:.5}");
    }
}
