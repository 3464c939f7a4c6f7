//! The phase runner: one freeze-scheduled training pass over a corpus
//! split.
//!
//! Batches are token-bounded. Each batch is split round-robin into a fixed
//! number of shards; shards run in parallel with thread-local gradient
//! buffers that are reduced in shard order, so results are bit-identical
//! regardless of thread count. Frozen stores never receive gradient
//! accumulation, which makes the freeze contract and the detached-graph
//! gradient-zero check structural.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::freeze::{FreezeSchedule, PhaseKind};
use crate::corpus::{context_set_for, Document};
use crate::ensemble::Ensemble;
use crate::error::{CueError, Result};
use crate::nn::{
    adamw_step, clip_gradients, AdamState, Grads, OneCycle, OptimizerConfig, ParamGroup,
    ParamStore,
};
use crate::proxy::{make_proxy, proxy_noise_rng, unigram_of, NormalizeMode};
use crate::rng;
use crate::sentence_encoder::{targets_of, with_bos};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub kind: PhaseKind,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Restrict the context set to these type names (adaptation subsets,
    /// single-signal runs). `None` keeps every type.
    pub context_types: Option<Vec<String>>,
    /// Proxy noise level (proxy phases only).
    pub sigma: f32,
    pub normalize_mode: NormalizeMode,
    /// Record the context-attention profile once per epoch.
    pub log_attention: bool,
    /// Override the default freeze schedule (still validated).
    pub freeze: Option<FreezeSchedule>,
}

impl PhaseConfig {
    pub fn new(kind: PhaseKind, seed: u64) -> Self {
        PhaseConfig {
            kind,
            seed,
            optimizer: OptimizerConfig::default(),
            context_types: None,
            sigma: 0.0,
            normalize_mode: NormalizeMode::UnitL2,
            log_attention: false,
            freeze: None,
        }
    }

    pub fn schedule(&self) -> FreezeSchedule {
        self.freeze
            .clone()
            .unwrap_or_else(|| FreezeSchedule::for_phase(self.kind))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Per-epoch context-attention profiles, when logged.
    pub attention_log: Vec<(usize, BTreeMap<String, f64>)>,
}

/// Gradient buffers for every model in the ensemble, masked by the freeze
/// schedule.
pub struct StepGrads {
    pub sentence: Grads,
    pub context: Option<Grads>,
    pub decoder: Option<Grads>,
    pub context_only: Option<Grads>,
    pub projector: Option<Grads>,
    pub autoencoder: Option<Grads>,
}

impl StepGrads {
    fn new(ens: &Ensemble, schedule: &FreezeSchedule) -> Self {
        let groups = schedule.trainable_groups();
        StepGrads {
            sentence: Grads::new(&ens.sentence.store, &groups),
            context: ens.context.as_ref().map(|m| Grads::new(&m.store, &groups)),
            decoder: ens.decoder.as_ref().map(|m| Grads::new(&m.store, &groups)),
            context_only: ens
                .context_only
                .as_ref()
                .map(|m| Grads::new(&m.store, &groups)),
            projector: ens
                .projector
                .as_ref()
                .map(|m| Grads::new(&m.store, &groups)),
            autoencoder: ens
                .autoencoder
                .as_ref()
                .map(|m| Grads::new(&m.store, &groups)),
        }
    }

    fn merge(&mut self, other: StepGrads) {
        self.sentence.merge(other.sentence);
        merge_opt(&mut self.context, other.context);
        merge_opt(&mut self.decoder, other.decoder);
        merge_opt(&mut self.context_only, other.context_only);
        merge_opt(&mut self.projector, other.projector);
        merge_opt(&mut self.autoencoder, other.autoencoder);
    }

    fn scale(&mut self, factor: f32) {
        self.sentence.scale(factor);
        for g in [
            &mut self.context,
            &mut self.decoder,
            &mut self.context_only,
            &mut self.projector,
            &mut self.autoencoder,
        ]
        .into_iter()
        .flatten()
        {
            g.scale(factor);
        }
    }

    fn all_mut(&mut self) -> Vec<&mut Grads> {
        let mut out: Vec<&mut Grads> = vec![&mut self.sentence];
        for g in [
            &mut self.context,
            &mut self.decoder,
            &mut self.context_only,
            &mut self.projector,
            &mut self.autoencoder,
        ]
        .into_iter()
        .flatten()
        {
            out.push(g);
        }
        out
    }
}

fn merge_opt(mine: &mut Option<Grads>, theirs: Option<Grads>) {
    if let (Some(m), Some(t)) = (mine.as_mut(), theirs) {
        m.merge(t);
    }
}

/// A training item: one sentence of one document.
pub type Item = (usize, usize);

pub fn items_of(docs: &[Document]) -> Vec<Item> {
    let mut items = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for s in 0..doc.sentences.len() {
            if !doc.sentences[s].is_empty() {
                items.push((d, s));
            }
        }
    }
    items
}

fn item_tokens(docs: &[Document], item: Item) -> &crate::corpus::TokenSequence {
    &docs[item.0].sentences[item.1]
}

fn item_key(docs: &[Document], item: Item) -> u64 {
    // stable per-sentence key for noise streams
    let mut h: u64 = 0xcbf29ce484222325;
    for b in docs[item.0].id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h ^ (item.1 as u64)
}



/// Precomputed values that are constant across a phase because the modules
/// producing them are frozen: sentence-encoder states for decoder phases,
/// text-encoder CLS embeddings during adaptation, autoencoder bottlenecks
/// during proxy training.
#[derive(Default)]
pub struct FrozenCaches {
    states: Option<std::collections::HashMap<(bool, usize, usize), ndarray::Array2<f32>>>,
    cls: Option<std::collections::HashMap<(bool, usize, String), ndarray::Array1<f32>>>,
    bottleneck: Option<std::collections::HashMap<(bool, usize, usize), ndarray::Array1<f32>>>,
}

impl FrozenCaches {
    pub fn build(
        ens: &Ensemble,
        cfg: &PhaseConfig,
        train: &[Document],
        valid: &[Document],
    ) -> Result<FrozenCaches> {
        let mut caches = FrozenCaches::default();
        let needs_states = matches!(
            cfg.kind,
            PhaseKind::TrainContext | PhaseKind::Adapt | PhaseKind::TrainProxy
        );
        if needs_states {
            let mut map = std::collections::HashMap::new();
            for (is_valid, docs) in [(false, train), (true, valid)] {
                let items = items_of(docs);
                let chunks: Vec<&[Item]> = items.chunks(256).collect();
                let computed: Vec<Result<Vec<((bool, usize, usize), ndarray::Array2<f32>)>>> =
                    chunks
                        .par_iter()
                        .map(|chunk| {
                            chunk
                                .iter()
                                .map(|&(d, s)| {
                                    let states =
                                        ens.sentence.states(&with_bos(&docs[d].sentences[s]))?;
                                    Ok(((is_valid, d, s), states))
                                })
                                .collect()
                        })
                        .collect();
                for c in computed {
                    map.extend(c?);
                }
            }
            caches.states = Some(map);
        }
        if cfg.kind == PhaseKind::Adapt {
            // text encoder frozen: CLS embeddings are phase constants
            let context = ens.context.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("context encoder required for adapt".into())
            })?;
            let mut map = std::collections::HashMap::new();
            for (is_valid, docs) in [(false, train), (true, valid)] {
                let mut keys: Vec<(usize, String, String)> = Vec::new();
                for (d, doc) in docs.iter().enumerate() {
                    for s in 0..doc.sentences.len() {
                        let ctx = context_set_for(doc, s, &ens.vocab, cfg.context_types.as_deref());
                        for (name, value) in ctx.slots {
                            let key = slot_cache_key(&name, s);
                            if !keys.iter().any(|(kd, kk, _)| *kd == d && kk == &key) {
                                keys.push((d, key, value));
                            }
                        }
                    }
                }
                let computed: Vec<((bool, usize, String), ndarray::Array1<f32>)> = keys
                    .par_iter()
                    .map(|(d, key, value)| {
                        (
                            (is_valid, *d, key.clone()),
                            context.cls_embedding(&ens.vocab, value),
                        )
                    })
                    .collect();
                map.extend(computed);
            }
            caches.cls = Some(map);
        }
        if cfg.kind == PhaseKind::TrainProxy {
            let ae = ens.autoencoder.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("autoencoder required for proxy training".into())
            })?;
            let mut map = std::collections::HashMap::new();
            for (is_valid, docs) in [(false, train), (true, valid)] {
                let items = items_of(docs);
                let computed: Vec<Result<((bool, usize, usize), ndarray::Array1<f32>)>> = items
                    .par_iter()
                    .map(|&(d, s)| {
                        let unigram = unigram_of(&docs[d].sentences[s])?;
                        Ok(((is_valid, d, s), ae.bottleneck(&unigram)))
                    })
                    .collect();
                for c in computed {
                    let (k, v) = c?;
                    map.insert(k, v);
                }
            }
            caches.bottleneck = Some(map);
        }
        Ok(caches)
    }

    fn states_of(
        &self,
        ens: &Ensemble,
        docs: &[Document],
        item: Item,
        is_valid: bool,
    ) -> Result<ndarray::Array2<f32>> {
        if let Some(map) = &self.states {
            if let Some(states) = map.get(&(is_valid, item.0, item.1)) {
                return Ok(states.clone());
            }
        }
        ens.sentence.states(&with_bos(&docs[item.0].sentences[item.1]))
    }
}

/// Cache key of a context slot: metadata slot values are constant per
/// document; the previous sentence varies by sentence index.
fn slot_cache_key(name: &str, sentence_idx: usize) -> String {
    if name == crate::corpus::PREVIOUS_SENTENCE {
        format!("{name}#{sentence_idx}")
    } else {
        name.to_string()
    }
}

/// Contextual shard processing with per-document metadata caching: the
/// metadata slots of a document are identical for all its sentences, so
/// their text encodings (and, in backward, their accumulated gradients)
/// are computed once per document per shard. Exact because backward is
/// linear in the upstream gradient at a fixed forward point.
struct ShardContextEncoder<'a> {
    context: &'a crate::context_encoder::ContextEncoder,
    vocab: &'a crate::corpus::Vocabulary,
    /// (doc index -> cached metadata slots in name order).
    docs_cache: std::collections::BTreeMap<usize, Vec<MetaSlot>>,
    /// Frozen CLS embeddings (adapt phase): slot text encodings are phase
    /// constants, only the FFN and context transformer run per step.
    frozen_cls: Option<&'a std::collections::HashMap<(bool, usize, String), ndarray::Array1<f32>>>,
    is_valid: bool,
}

struct MetaSlot {
    name: String,
    g: ndarray::Array1<f32>,
    text: Option<crate::context_encoder::TextCache>,
    ffn: crate::context_encoder::FfnCache,
    dg: ndarray::Array1<f32>,
    used: bool,
}

enum SlotRow {
    /// Index into the document's cached metadata slots.
    Meta(usize),
    /// Per-sentence slot (previous sentence), with its own caches.
    Fresh(usize),
}

struct ItemContext {
    doc: usize,
    rows: Vec<SlotRow>,
    fresh: Vec<(Option<crate::context_encoder::TextCache>, crate::context_encoder::FfnCache)>,
    pool: Option<crate::context_encoder::PoolCache>,
    e_cue: ndarray::Array1<f32>,
}

impl<'a> ShardContextEncoder<'a> {
    fn new(
        context: &'a crate::context_encoder::ContextEncoder,
        vocab: &'a crate::corpus::Vocabulary,
        frozen_cls: Option<&'a std::collections::HashMap<(bool, usize, String), ndarray::Array1<f32>>>,
        is_valid: bool,
    ) -> Self {
        ShardContextEncoder {
            context,
            vocab,
            docs_cache: std::collections::BTreeMap::new(),
            frozen_cls,
            is_valid,
        }
    }

    /// Slot embedding: from the frozen CLS cache when available (only the
    /// FFN runs), else through the full text encoder.
    fn embed_slot(
        &self,
        doc: usize,
        sentence_idx: usize,
        name: &str,
        value: &str,
    ) -> (
        ndarray::Array1<f32>,
        Option<crate::context_encoder::TextCache>,
        crate::context_encoder::FfnCache,
    ) {
        if let Some(cls_map) = self.frozen_cls {
            let key = (self.is_valid, doc, slot_cache_key(name, sentence_idx));
            if let Some(cls) = cls_map.get(&key) {
                let (g, ffn) = self.context.project_cls_cached(cls.clone());
                return (g, None, ffn);
            }
        }
        let (g, text, ffn) = self.context.embed_context_string_cached(self.vocab, value);
        (g, Some(text), ffn)
    }

    fn encode(
        &mut self,
        docs: &[Document],
        item: Item,
        filter: Option<&[String]>,
    ) -> ItemContext {
        let ctx_set = context_set_for(&docs[item.0], item.1, self.vocab, filter).sorted();
        if ctx_set.is_empty() {
            let e_cue = self.context.null_context_vector();
            return ItemContext {
                doc: item.0,
                rows: Vec::new(),
                fresh: Vec::new(),
                pool: None,
                e_cue,
            };
        }
        let context = self.context;
        let vocab = self.vocab;
        let _ = vocab;
        if !self.docs_cache.contains_key(&item.0) {
            let slots: Vec<MetaSlot> = ctx_set
                .slots
                .iter()
                .filter(|(name, _)| name != crate::corpus::PREVIOUS_SENTENCE)
                .map(|(name, value)| {
                    let (g, text, ffn) = self.embed_slot(item.0, item.1, name, value);
                    let dg = ndarray::Array1::zeros(g.len());
                    MetaSlot {
                        name: name.clone(),
                        g,
                        text,
                        ffn,
                        dg,
                        used: false,
                    }
                })
                .collect();
            self.docs_cache.insert(item.0, slots);
        }
        let _ = context;

        let k = ctx_set.len();
        let mut g = ndarray::Array2::<f32>::zeros((k, context.cfg.out_dim));
        let mut rows = Vec::with_capacity(k);
        let mut fresh = Vec::new();
        for (i, (name, value)) in ctx_set.slots.iter().enumerate() {
            if name == crate::corpus::PREVIOUS_SENTENCE {
                let (gk, text, ffn) = self.embed_slot(item.0, item.1, name, value);
                g.row_mut(i).assign(&gk);
                rows.push(SlotRow::Fresh(fresh.len()));
                fresh.push((text, ffn));
            } else {
                let cache = self.docs_cache.get_mut(&item.0).unwrap();
                let mi = cache
                    .iter()
                    .position(|m| &m.name == name)
                    .expect("metadata slot cached");
                cache[mi].used = true;
                g.row_mut(i).assign(&cache[mi].g);
                rows.push(SlotRow::Meta(mi));
            }
        }
        let (e_cue, pool) = self.context.pool_slots(&g);
        ItemContext {
            doc: item.0,
            rows,
            fresh,
            pool: Some(pool),
            e_cue,
        }
    }

    fn backward_item(
        &mut self,
        item_ctx: &ItemContext,
        d_e_cue: &ndarray::Array1<f32>,
        backprop_text: bool,
        grads: &mut Grads,
    ) {
        let Some(pool) = &item_ctx.pool else {
            // empty context set: gradient lands on the null vector
            self.context.backward(None, d_e_cue, backprop_text, grads);
            return;
        };
        let dg = self.context.pool_backward(pool, d_e_cue, grads);
        for (i, row) in item_ctx.rows.iter().enumerate() {
            let drow = dg.row(i).to_owned();
            match row {
                SlotRow::Fresh(fi) => {
                    let (text, ffn) = &item_ctx.fresh[*fi];
                    self.context
                        .slot_backward_opt(text.as_ref(), ffn, &drow, backprop_text, grads);
                }
                SlotRow::Meta(mi) => {
                    let slot = &mut self.docs_cache.get_mut(&item_ctx.doc).unwrap()[*mi];
                    slot.dg += &drow;
                }
            }
        }
    }

    /// Flushes the accumulated metadata-slot gradients, one backward call
    /// per (document, slot).
    fn finish(self, backprop_text: bool, grads: &mut Grads) {
        for slots in self.docs_cache.values() {
            for slot in slots {
                if slot.used && slot.dg.iter().any(|&x| x != 0.0) {
                    self.context.slot_backward_opt(
                        slot.text.as_ref(),
                        &slot.ffn,
                        &slot.dg,
                        backprop_text,
                        grads,
                    );
                }
            }
        }
    }
}

/// Forward/backward of one shard of items; returns (nll_sum, token_count).
/// Encoder and decoder bodies run per sentence; vocabulary projections are
/// batched across the shard.
fn shard_backward(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    docs: &[Document],
    shard: &[Item],
    epoch: usize,
    grads: &mut StepGrads,
    backprop_text: bool,
    caches: &FrozenCaches,
) -> Result<(f64, usize)> {
    if shard.is_empty() {
        return Ok((0.0, 0));
    }
    match cfg.kind {
        PhaseKind::PretrainLm => {
            let items: Vec<(Vec<u32>, Vec<u32>)> = shard
                .iter()
                .map(|&item| {
                    let tokens = item_tokens(docs, item);
                    (with_bos(tokens), targets_of(tokens))
                })
                .collect();
            ens.sentence.train_backward_batch(&items, &mut grads.sentence)
        }
        PhaseKind::TrainContext | PhaseKind::Adapt => {
            let context = ens.context.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("context encoder required for this phase".into())
            })?;
            let decoder = ens.decoder.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("decoder required for this phase".into())
            })?;
            let mut shard_enc =
                ShardContextEncoder::new(context, &ens.vocab, caches.cls.as_ref(), false);
            let mut fused = Vec::with_capacity(shard.len());
            let mut item_ctxs = Vec::with_capacity(shard.len());
            for &item in shard {
                let tokens = item_tokens(docs, item);
                let states = caches.states_of(ens, docs, item, false)?;
                let item_ctx = shard_enc.encode(docs, item, cfg.context_types.as_deref());
                fused.push((states, item_ctx.e_cue.clone(), targets_of(tokens)));
                item_ctxs.push(item_ctx);
            }
            let (total, count, d_cues) = decoder.train_backward_batch(
                &fused,
                grads.decoder.as_mut().expect("decoder grads"),
            )?;
            let ctx_grads = grads.context.as_mut().expect("context grads");
            for (item_ctx, d_e_cue) in item_ctxs.iter().zip(&d_cues) {
                shard_enc.backward_item(item_ctx, d_e_cue, backprop_text, ctx_grads);
            }
            shard_enc.finish(backprop_text, ctx_grads);
            Ok((total, count))
        }
        PhaseKind::TrainContextOnly => {
            let context = ens.context.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("context encoder required for this phase".into())
            })?;
            let head = ens.context_only.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("context-only head required for this phase".into())
            })?;
            let mut shard_enc =
                ShardContextEncoder::new(context, &ens.vocab, caches.cls.as_ref(), false);
            let mut items = Vec::with_capacity(shard.len());
            let mut item_ctxs = Vec::with_capacity(shard.len());
            for &item in shard {
                let tokens = item_tokens(docs, item);
                let item_ctx = shard_enc.encode(docs, item, cfg.context_types.as_deref());
                items.push((item_ctx.e_cue.clone(), targets_of(tokens)));
                item_ctxs.push(item_ctx);
            }
            let (total, count, d_cues) = head.train_backward_batch(
                &items,
                grads.context_only.as_mut().expect("head grads"),
            );
            let ctx_grads = grads.context.as_mut().expect("context grads");
            for (item_ctx, d_e_cue) in item_ctxs.iter().zip(&d_cues) {
                shard_enc.backward_item(item_ctx, d_e_cue, backprop_text, ctx_grads);
            }
            shard_enc.finish(backprop_text, ctx_grads);
            Ok((total, count))
        }
        PhaseKind::TrainProxy => {
            let decoder = ens.decoder.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("decoder required for proxy training".into())
            })?;
            let projector = ens.projector.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("projector required for proxy training".into())
            })?;
            let mut fused = Vec::with_capacity(shard.len());
            let mut proxies = Vec::with_capacity(shard.len());
            for &item in shard {
                let tokens = item_tokens(docs, item);
                let states = caches.states_of(ens, docs, item, false)?;
                let mut noise = proxy_noise_rng(cfg.seed, epoch, item_key(docs, item));
                let proxy = cached_proxy(ens, caches, docs, item, false, cfg, &mut noise)?;
                let e_cue = projector.forward(&proxy);
                fused.push((states, e_cue, targets_of(tokens)));
                proxies.push(proxy);
            }
            let (total, count, d_cues) = decoder.train_backward_batch(
                &fused,
                grads.decoder.as_mut().expect("decoder grads"),
            )?;
            for (proxy, d_e_cue) in proxies.iter().zip(&d_cues) {
                projector.backward(
                    proxy,
                    d_e_cue,
                    grads.projector.as_mut().expect("projector grads"),
                );
            }
            Ok((total, count))
        }
        PhaseKind::TrainAutoencoder => {
            let ae = ens.autoencoder.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("autoencoder must be constructed first".into())
            })?;
            let unigrams: Result<Vec<_>> = shard
                .iter()
                .map(|&item| unigram_of(item_tokens(docs, item)))
                .collect();
            let unigrams = unigrams?;
            let mean_kl = ae.train_backward(
                &unigrams,
                grads.autoencoder.as_mut().expect("autoencoder grads"),
            );
            // report the shard sum so the batch-level mean is correct
            Ok((mean_kl * unigrams.len() as f64, unigrams.len()))
        }
    }
}

/// Forward-only loss of one shard under the phase objective.
fn shard_loss(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    docs: &[Document],
    shard: &[Item],
    noise_label: u64,
    caches: &FrozenCaches,
    is_valid: bool,
) -> Result<(f64, usize)> {
    if shard.is_empty() {
        return Ok((0.0, 0));
    }
    match cfg.kind {
        PhaseKind::PretrainLm => {
            let items: Vec<(Vec<u32>, Vec<u32>)> = shard
                .iter()
                .map(|&item| {
                    let tokens = item_tokens(docs, item);
                    (with_bos(tokens), targets_of(tokens))
                })
                .collect();
            ens.sentence.nll_batch(&items)
        }
        PhaseKind::TrainContext | PhaseKind::Adapt => {
            let context = ens.context.as_ref().expect("validated");
            let decoder = ens.decoder.as_ref().expect("validated");
            let mut shard_enc =
                ShardContextEncoder::new(context, &ens.vocab, caches.cls.as_ref(), is_valid);
            let mut fused = Vec::with_capacity(shard.len());
            for &item in shard {
                let tokens = item_tokens(docs, item);
                let states = caches.states_of(ens, docs, item, is_valid)?;
                let item_ctx = shard_enc.encode(docs, item, cfg.context_types.as_deref());
                fused.push((states, item_ctx.e_cue, targets_of(tokens)));
            }
            decoder.nll_batch(&fused)
        }
        PhaseKind::TrainContextOnly => {
            let context = ens.context.as_ref().expect("validated");
            let head = ens.context_only.as_ref().expect("validated");
            let mut shard_enc =
                ShardContextEncoder::new(context, &ens.vocab, caches.cls.as_ref(), is_valid);
            let mut items = Vec::with_capacity(shard.len());
            for &item in shard {
                let tokens = item_tokens(docs, item);
                let item_ctx = shard_enc.encode(docs, item, cfg.context_types.as_deref());
                items.push((item_ctx.e_cue, targets_of(tokens)));
            }
            Ok(head.nll_batch(&items))
        }
        PhaseKind::TrainProxy => {
            let decoder = ens.decoder.as_ref().expect("validated");
            let projector = ens.projector.as_ref().expect("validated");
            let mut fused = Vec::with_capacity(shard.len());
            for &item in shard {
                let tokens = item_tokens(docs, item);
                let states = caches.states_of(ens, docs, item, is_valid)?;
                let mut noise = proxy_noise_rng(
                    cfg.seed ^ 0x5eed,
                    noise_label as usize,
                    item_key(docs, item),
                );
                let proxy = cached_proxy(ens, caches, docs, item, is_valid, cfg, &mut noise)?;
                let e_cue = projector.forward(&proxy);
                fused.push((states, e_cue, targets_of(tokens)));
            }
            decoder.nll_batch(&fused)
        }
        PhaseKind::TrainAutoencoder => {
            let ae = ens.autoencoder.as_ref().expect("validated");
            let unigrams: Result<Vec<_>> = shard
                .iter()
                .map(|&item| unigram_of(item_tokens(docs, item)))
                .collect();
            let unigrams = unigrams?;
            Ok((ae.kl_loss(&unigrams) * unigrams.len() as f64, unigrams.len()))
        }
    }
}


/// Proxy vector from the cached bottleneck plus fresh noise, renormalized.
fn cached_proxy(
    ens: &Ensemble,
    caches: &FrozenCaches,
    docs: &[Document],
    item: Item,
    is_valid: bool,
    cfg: &PhaseConfig,
    noise: &mut rand_chacha::ChaCha8Rng,
) -> Result<ndarray::Array1<f32>> {
    let mut v = match caches
        .bottleneck
        .as_ref()
        .and_then(|m| m.get(&(is_valid, item.0, item.1)))
    {
        Some(z) => z.clone(),
        None => {
            let ae = ens.autoencoder.as_ref().ok_or_else(|| {
                CueError::MissingCheckpoint("autoencoder required for proxy training".into())
            })?;
            return make_proxy(ae, item_tokens(docs, item), cfg.sigma, cfg.normalize_mode, noise)
                .map(|p| p.vector);
        }
    };
    if cfg.sigma > 0.0 {
        for slot in v.iter_mut() {
            *slot += cfg.sigma * crate::nn::param::sample_normal(noise);
        }
    }
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm < 1e-12 {
        v.fill(0.0);
        v[0] = 1.0;
    } else {
        match cfg.normalize_mode {
            NormalizeMode::UnitL2 => v.mapv_inplace(|x| x / norm),
            NormalizeMode::DivideBySquaredNorm => v.mapv_inplace(|x| x / (norm * norm)),
        }
    }
    Ok(v)
}

/// Gradients for one batch of items: shards computed in parallel, reduced
/// in fixed shard order. Public so the detached-graph gradient-zero check
/// can inspect a single batch.
pub fn batch_gradients(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    docs: &[Document],
    items: &[Item],
    epoch: usize,
) -> Result<(StepGrads, f64, usize)> {
    batch_gradients_cached(ens, cfg, docs, items, epoch, &FrozenCaches::default())
}

fn batch_gradients_cached(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    docs: &[Document],
    items: &[Item],
    epoch: usize,
    caches: &FrozenCaches,
) -> Result<(StepGrads, f64, usize)> {
    let schedule = cfg.schedule();
    let backprop_text = schedule.is_trainable(ParamGroup::TextEncoder);
    let shards: Vec<Vec<Item>> = {
        let mut shards = vec![Vec::new(); cfg.optimizer.grad_shards];
        for (i, &item) in items.iter().enumerate() {
            shards[i % cfg.optimizer.grad_shards].push(item);
        }
        shards
    };
    let results: Vec<Result<(StepGrads, f64, usize)>> = shards
        .par_iter()
        .map(|shard| {
            let mut grads = StepGrads::new(ens, &schedule);
            let (loss, count) =
                shard_backward(ens, cfg, docs, shard, epoch, &mut grads, backprop_text, caches)?;
            Ok((grads, loss, count))
        })
        .collect();

    let mut total_grads: Option<StepGrads> = None;
    let mut total_loss = 0.0f64;
    let mut total_count = 0usize;
    for result in results {
        let (grads, loss, count) = result?;
        total_loss += loss;
        total_count += count;
        match &mut total_grads {
            Some(t) => t.merge(grads),
            slot => *slot = Some(grads),
        }
    }
    Ok((
        total_grads.expect("at least one shard"),
        total_loss,
        total_count,
    ))
}

/// Mean loss over a split, forward only, parallel over items.
pub fn split_loss(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    docs: &[Document],
    noise_label: u64,
) -> Result<(f64, usize)> {
    split_loss_cached(ens, cfg, docs, noise_label, &FrozenCaches::default(), false)
}

fn split_loss_cached(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    docs: &[Document],
    noise_label: u64,
    caches: &FrozenCaches,
    is_valid: bool,
) -> Result<(f64, usize)> {
    let items = items_of(docs);
    let chunks: Vec<&[Item]> = items.chunks(96.max(items.len() / 64 + 1)).collect();
    let results: Vec<Result<(f64, usize)>> = chunks
        .par_iter()
        .map(|chunk| shard_loss(ens, cfg, docs, chunk, noise_label, caches, is_valid))
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in results {
        let (l, c) = r?;
        total += l;
        count += c;
    }
    Ok((total, count))
}

struct TrainableStores<'a> {
    stores: Vec<&'a mut ParamStore>,
    grads_index: Vec<usize>,
}

/// Orders the mutable stores being optimized; index pairs into the
/// StepGrads field order [sentence, context, decoder, context_only,
/// projector, autoencoder].
fn trainable_stores<'a>(ens: &'a mut Ensemble, schedule: &FreezeSchedule) -> TrainableStores<'a> {
    let mut stores: Vec<&mut ParamStore> = Vec::new();
    let mut grads_index = Vec::new();
    let groups = |store: &ParamStore| -> bool {
        store
            .metas()
            .iter()
            .any(|m| schedule.is_trainable(m.group))
    };
    if groups(&ens.sentence.store) {
        stores.push(&mut ens.sentence.store);
        grads_index.push(0);
    }
    if let Some(m) = ens.context.as_mut() {
        if groups(&m.store) {
            stores.push(&mut m.store);
            grads_index.push(1);
        }
    }
    if let Some(m) = ens.decoder.as_mut() {
        if groups(&m.store) {
            stores.push(&mut m.store);
            grads_index.push(2);
        }
    }
    if let Some(m) = ens.context_only.as_mut() {
        if groups(&m.store) {
            stores.push(&mut m.store);
            grads_index.push(3);
        }
    }
    if let Some(m) = ens.projector.as_mut() {
        if groups(&m.store) {
            stores.push(&mut m.store);
            grads_index.push(4);
        }
    }
    if let Some(m) = ens.autoencoder.as_mut() {
        if groups(&m.store) {
            stores.push(&mut m.store);
            grads_index.push(5);
        }
    }
    TrainableStores {
        stores,
        grads_index,
    }
}

fn grads_field(grads: &mut StepGrads, index: usize) -> &mut Grads {
    match index {
        0 => &mut grads.sentence,
        1 => grads.context.as_mut().unwrap(),
        2 => grads.decoder.as_mut().unwrap(),
        3 => grads.context_only.as_mut().unwrap(),
        4 => grads.projector.as_mut().unwrap(),
        5 => grads.autoencoder.as_mut().unwrap(),
        _ => unreachable!(),
    }
}

/// Runs one training phase in memory. Deterministic for a fixed seed.
pub fn run_phase(
    ens: &mut Ensemble,
    cfg: &PhaseConfig,
    train: &[Document],
    valid: &[Document],
) -> Result<PhaseOutcome> {
    run_phase_with_dir(ens, cfg, train, valid, None)
}

/// Like [`run_phase_with_dir`], stopping after `stop_after` epochs while
/// keeping the full-length learning-rate schedule: simulates an
/// interrupted run that a later invocation resumes.
pub fn run_phase_interrupted(
    ens: &mut Ensemble,
    cfg: &PhaseConfig,
    train: &[Document],
    valid: &[Document],
    out_dir: &Path,
    stop_after: usize,
) -> Result<PhaseOutcome> {
    run_phase_inner(ens, cfg, train, valid, Some(out_dir), Some(stop_after))
}

#[derive(Serialize, Deserialize)]
struct PhaseState {
    epochs_done: usize,
    metrics: Vec<EpochMetrics>,
    attention_log: Vec<(usize, BTreeMap<String, f64>)>,
}

/// Runs a phase with optional epoch-granular checkpointing in `out_dir`,
/// resuming from a partial state when one is present. A resumed run
/// reproduces the uninterrupted run bit for bit.
pub fn run_phase_with_dir(
    ens: &mut Ensemble,
    cfg: &PhaseConfig,
    train: &[Document],
    valid: &[Document],
    out_dir: Option<&Path>,
) -> Result<PhaseOutcome> {
    run_phase_inner(ens, cfg, train, valid, out_dir, None)
}

fn run_phase_inner(
    ens: &mut Ensemble,
    cfg: &PhaseConfig,
    train: &[Document],
    valid: &[Document],
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<PhaseOutcome> {
    cfg.optimizer.validate()?;
    let schedule = cfg.schedule();
    schedule.validate_for(cfg.kind)?;
    validate_phase_inputs(ens, cfg)?;

    let items = items_of(train);
    if items.is_empty() {
        return Err(CueError::EmptyInput("training split".into()));
    }
    let total_tokens: usize = items
        .iter()
        .map(|&(d, s)| train[d].sentences[s].len() + 1)
        .sum();
    let steps_per_epoch =
        (total_tokens + cfg.optimizer.batch_tokens - 1) / cfg.optimizer.batch_tokens;
    let sched = OneCycle::from_config(&cfg.optimizer, steps_per_epoch * cfg.optimizer.epochs);

    let mut adam_states: Vec<AdamState> = {
        let t = trainable_stores(ens, &schedule);
        t.stores.iter().map(|s| AdamState::new(s)).collect()
    };
    let frozen = FrozenCaches::build(ens, cfg, train, valid)?;

    let mut outcome = PhaseOutcome::default();
    let mut start_epoch = 0usize;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CueError::io(dir.display().to_string(), e))?;
        if let Some(state) = try_resume(ens, cfg, &schedule, &mut adam_states, dir)? {
            start_epoch = state.epochs_done;
            outcome.metrics = state.metrics;
            outcome.attention_log = state.attention_log;
        }
    }

    let end_epoch = stop_after
        .map(|s| s.min(cfg.optimizer.epochs))
        .unwrap_or(cfg.optimizer.epochs);
    for epoch in start_epoch..end_epoch {
        // deterministic epoch shuffle and token-bounded batching
        let mut order = items.clone();
        {
            use rand::seq::SliceRandom;
            let mut r = rng::derive_indexed(cfg.seed, "epoch-order", epoch as u64);
            order.shuffle(&mut r);
        }
        let mut epoch_loss = 0.0f64;
        let mut epoch_count = 0usize;
        let mut cursor = 0usize;
        let mut batch_idx = 0usize;
        while cursor < order.len() {
            let mut batch = Vec::new();
            let mut tokens = 0usize;
            while cursor < order.len() && tokens < cfg.optimizer.batch_tokens {
                let item = order[cursor];
                tokens += train[item.0].sentences[item.1].len() + 1;
                batch.push(item);
                cursor += 1;
            }
            let (mut grads, loss, count) =
                batch_gradients_cached(ens, cfg, train, &batch, epoch, &frozen)?;
            if !loss.is_finite() {
                return Err(CueError::Diverged {
                    epoch,
                    batch: batch_idx,
                    last_good: out_dir.map(|d| d.join("phase_state.bin")),
                });
            }
            epoch_loss += loss;
            epoch_count += count;
            // normalize the gradient of the summed loss to a batch mean
            grads.scale(1.0 / count.max(1) as f32);
            clip_gradients(
                &mut grads.all_mut(),
                cfg.optimizer.clip,
                cfg.optimizer.clip_mode,
            );
            let lr = sched.lr(epoch * steps_per_epoch + batch_idx.min(steps_per_epoch - 1));
            let trainable = trainable_stores(ens, &schedule);
            for ((store, &gidx), state) in trainable
                .stores
                .into_iter()
                .zip(&trainable.grads_index)
                .zip(adam_states.iter_mut())
            {
                adamw_step(store, grads_field(&mut grads, gidx), state, &cfg.optimizer, lr);
            }
            batch_idx += 1;
        }

        let train_loss = epoch_loss / epoch_count.max(1) as f64;
        outcome.metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: train_loss,
            ppl: train_loss.exp(),
        });
        if !valid.is_empty() {
            let (vloss, vcount) = split_loss_cached(ens, cfg, valid, epoch as u64, &frozen, true)?;
            let v = vloss / vcount.max(1) as f64;
            outcome.metrics.push(EpochMetrics {
                epoch,
                split: "valid".into(),
                loss: v,
                ppl: v.exp(),
            });
        }
        if cfg.log_attention {
            if let Some(profile) = probe_attention(ens, cfg, valid.iter().chain(train).next())? {
                outcome.attention_log.push((epoch, profile));
            }
        }
        if let Some(dir) = out_dir {
            save_state(ens, cfg, &schedule, &adam_states, &outcome, epoch + 1, dir)?;
        }
    }
    Ok(outcome)
}

fn validate_phase_inputs(ens: &Ensemble, cfg: &PhaseConfig) -> Result<()> {
    let need = |ok: bool, what: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(CueError::MissingCheckpoint(format!(
                "{} phase requires {what}",
                cfg.kind.name()
            )))
        }
    };
    match cfg.kind {
        PhaseKind::PretrainLm => Ok(()),
        PhaseKind::TrainAutoencoder => need(ens.autoencoder.is_some(), "an autoencoder"),
        PhaseKind::TrainContext => {
            need(ens.context.is_some(), "a context encoder")?;
            need(ens.decoder.is_some(), "a decoder")
        }
        PhaseKind::TrainContextOnly => {
            need(ens.context.is_some(), "a context encoder")?;
            need(ens.context_only.is_some(), "a context-only head")
        }
        PhaseKind::TrainProxy => {
            need(ens.autoencoder.is_some(), "a trained autoencoder")?;
            need(ens.decoder.is_some(), "a decoder")?;
            need(ens.projector.is_some(), "a proxy projector")
        }
        PhaseKind::Adapt => {
            need(ens.context.is_some(), "a context encoder")?;
            need(
                ens.decoder.is_some(),
                "a decoder checkpoint from context or proxy training",
            )
        }
    }
}

fn probe_attention(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    doc: Option<&Document>,
) -> Result<Option<BTreeMap<String, f64>>> {
    let (Some(context), Some(doc)) = (&ens.context, doc) else {
        return Ok(None);
    };
    let ctx = context_set_for(doc, doc.sentences.len() - 1, &ens.vocab, cfg.context_types.as_deref());
    if ctx.is_empty() {
        return Ok(None);
    }
    match context.context_attention_profile(&ens.vocab, &ctx) {
        Ok(p) => Ok(Some(p)),
        Err(_) => Ok(None),
    }
}

fn state_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("phase_state.bin"), dir.join("phase_state.json"))
}

fn save_state(
    ens: &Ensemble,
    cfg: &PhaseConfig,
    schedule: &FreezeSchedule,
    adam_states: &[AdamState],
    outcome: &PhaseOutcome,
    epochs_done: usize,
    dir: &Path,
) -> Result<()> {
    let (bin_path, json_path) = state_paths(dir);
    // store bytes of every trainable store plus adam moments
    let mut payload: Vec<u8> = Vec::new();
    {
        let stores = trainable_store_refs(ens, schedule);
        payload.extend_from_slice(&(stores.len() as u64).to_le_bytes());
        for store in stores {
            let bytes = store.to_bytes();
            payload.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            payload.extend_from_slice(&bytes);
        }
        for state in adam_states {
            let bytes = state.to_bytes();
            payload.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            payload.extend_from_slice(&bytes);
        }
    }
    std::fs::write(&bin_path, payload)
        .map_err(|e| CueError::io(bin_path.display().to_string(), e))?;
    let state = PhaseState {
        epochs_done,
        metrics: outcome.metrics.clone(),
        attention_log: outcome.attention_log.clone(),
    };
    let json = serde_json::to_string(&state).map_err(|e| CueError::json("phase state", e))?;
    std::fs::write(&json_path, json)
        .map_err(|e| CueError::io(json_path.display().to_string(), e))?;
    let _ = cfg;
    Ok(())
}

fn trainable_store_refs<'a>(ens: &'a Ensemble, schedule: &FreezeSchedule) -> Vec<&'a ParamStore> {
    let has = |store: &ParamStore| store.metas().iter().any(|m| schedule.is_trainable(m.group));
    let mut out: Vec<&ParamStore> = Vec::new();
    if has(&ens.sentence.store) {
        out.push(&ens.sentence.store);
    }
    if let Some(m) = &ens.context {
        if has(&m.store) {
            out.push(&m.store);
        }
    }
    if let Some(m) = &ens.decoder {
        if has(&m.store) {
            out.push(&m.store);
        }
    }
    if let Some(m) = &ens.context_only {
        if has(&m.store) {
            out.push(&m.store);
        }
    }
    if let Some(m) = &ens.projector {
        if has(&m.store) {
            out.push(&m.store);
        }
    }
    if let Some(m) = &ens.autoencoder {
        if has(&m.store) {
            out.push(&m.store);
        }
    }
    out
}

fn try_resume(
    ens: &mut Ensemble,
    _cfg: &PhaseConfig,
    schedule: &FreezeSchedule,
    adam_states: &mut [AdamState],
    dir: &Path,
) -> Result<Option<PhaseState>> {
    let (bin_path, json_path) = state_paths(dir);
    if !bin_path.exists() || !json_path.exists() {
        return Ok(None);
    }
    let state: PhaseState = serde_json::from_str(
        &std::fs::read_to_string(&json_path)
            .map_err(|e| CueError::io(json_path.display().to_string(), e))?,
    )
    .map_err(|e| CueError::json("phase state", e))?;
    let payload =
        std::fs::read(&bin_path).map_err(|e| CueError::io(bin_path.display().to_string(), e))?;
    let corrupt = || CueError::Other(format!("corrupt phase state at {}", bin_path.display()));
    let mut off = 0usize;
    let take8 = |off: &mut usize| -> Result<u64> {
        let v = u64::from_le_bytes(
            payload
                .get(*off..*off + 8)
                .ok_or_else(corrupt)?
                .try_into()
                .unwrap(),
        );
        *off += 8;
        Ok(v)
    };
    let n_stores = take8(&mut off)? as usize;
    {
        let trainable = trainable_stores(ens, schedule);
        if trainable.stores.len() != n_stores || adam_states.len() != n_stores {
            return Err(corrupt());
        }
        for store in trainable.stores {
            let len = take8(&mut off)? as usize;
            store.load_bytes(payload.get(off..off + len).ok_or_else(corrupt)?)?;
            off += len;
        }
    }
    let trainable = trainable_stores(ens, schedule);
    for (state, store) in adam_states.iter_mut().zip(trainable.stores.iter()) {
        let len = take8(&mut off)? as usize;
        state.load_bytes(store, payload.get(off..off + len).ok_or_else(corrupt)?)?;
        off += len;
    }
    Ok(Some(state))
}
