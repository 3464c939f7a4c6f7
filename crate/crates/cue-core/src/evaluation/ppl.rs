//! Perplexity evaluation across context modes.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextSet, Document, PREVIOUS_SENTENCE};
use crate::ensemble::Ensemble;
use crate::error::{CueError, Result};
use crate::proxy::{make_proxy, proxy_noise_rng, NormalizeMode};
use crate::sentence_encoder::{targets_of, with_bos};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    None,
    MetadataOnly,
    PreviousSentenceOnly,
    Full,
    ProxyOracle { sigma: f32 },
}

impl ContextMode {
    pub fn name(&self) -> String {
        match self {
            ContextMode::None => "none".into(),
            ContextMode::MetadataOnly => "metadata-only".into(),
            ContextMode::PreviousSentenceOnly => "previous-sentence-only".into(),
            ContextMode::Full => "full".into(),
            ContextMode::ProxyOracle { sigma } => format!("proxy-oracle({sigma})"),
        }
    }
}

/// A perplexity measurement; the perplexity is exactly exp(mean NLL) and
/// the token count excludes PAD but includes EOS.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplReport {
    pub corpus: String,
    pub mode: String,
    pub token_count: usize,
    pub mean_nll: f64,
    pub ppl: f64,
    pub per_bin: Option<BTreeMap<String, f64>>,
}

impl PplReport {
    fn from_sums(corpus: &str, mode: String, total: f64, count: usize) -> PplReport {
        let mean = total / count.max(1) as f64;
        PplReport {
            corpus: corpus.to_string(),
            mode,
            token_count: count,
            mean_nll: mean,
            ppl: mean.exp(),
            per_bin: None,
        }
    }
}

/// Builds the context set a mode sees for one sentence.
pub fn context_for_mode(
    doc: &Document,
    sentence_idx: usize,
    vocab: &crate::corpus::Vocabulary,
    mode: &ContextMode,
    type_filter: Option<&[String]>,
) -> ContextSet {
    let base = |filter: Option<&[String]>| {
        crate::corpus::context_set_for(doc, sentence_idx, vocab, filter)
    };
    match mode {
        ContextMode::Full => base(type_filter),
        ContextMode::MetadataOnly => {
            let set = base(type_filter);
            ContextSet::new(
                set.slots
                    .into_iter()
                    .filter(|(name, _)| name != PREVIOUS_SENTENCE)
                    .collect(),
            )
        }
        ContextMode::PreviousSentenceOnly => {
            let keep = [PREVIOUS_SENTENCE.to_string()];
            base(Some(&keep))
        }
        ContextMode::None | ContextMode::ProxyOracle { .. } => ContextSet::default(),
    }
}

fn require<'a, T>(part: Option<&'a T>, mode: &ContextMode, what: &str) -> Result<&'a T> {
    part.ok_or_else(|| CueError::IncompatibleMode {
        mode: mode.name(),
        reason: format!("ensemble has no {what}"),
    })
}

/// Evaluates perplexity of the ensemble on a split under a context mode.
/// Mode `none` routes through the fusion-free sentence-encoder path.
pub fn evaluate_ppl(
    ens: &Ensemble,
    docs: &[Document],
    corpus_id: &str,
    mode: &ContextMode,
    type_filter: Option<&[String]>,
) -> Result<PplReport> {
    match mode {
        ContextMode::None => {}
        ContextMode::ProxyOracle { .. } => {
            require(ens.autoencoder.as_ref(), mode, "autoencoder")?;
            require(ens.projector.as_ref(), mode, "proxy projector")?;
            require(ens.decoder.as_ref(), mode, "decoder")?;
        }
        _ => {
            require(ens.context.as_ref(), mode, "context encoder")?;
            require(ens.decoder.as_ref(), mode, "decoder")?;
        }
    }
    let items: Vec<(usize, usize)> = crate::training::items_of(docs);
    let chunks: Vec<&[(usize, usize)]> = items.chunks(96.max(items.len() / 64 + 1)).collect();
    let results: Vec<Result<(f64, usize)>> = chunks
        .par_iter()
        .map(|chunk| chunk_nll(ens, docs, chunk, mode, type_filter))
        .collect();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in results {
        let (t, c) = r?;
        total += t;
        count += c;
    }
    Ok(PplReport::from_sums(corpus_id, mode.name(), total, count))
}

fn chunk_nll(
    ens: &Ensemble,
    docs: &[Document],
    chunk: &[(usize, usize)],
    mode: &ContextMode,
    type_filter: Option<&[String]>,
) -> Result<(f64, usize)> {
    match mode {
        ContextMode::None => {
            let items: Vec<(Vec<u32>, Vec<u32>)> = chunk
                .iter()
                .map(|&(d, s)| {
                    let tokens = &docs[d].sentences[s];
                    (with_bos(tokens), targets_of(tokens))
                })
                .collect();
            ens.sentence.nll_batch(&items)
        }
        ContextMode::ProxyOracle { sigma } => {
            let ae = ens.autoencoder.as_ref().unwrap();
            let projector = ens.projector.as_ref().unwrap();
            let decoder = ens.decoder.as_ref().unwrap();
            let mut fused = Vec::with_capacity(chunk.len());
            for &(d, s) in chunk {
                let doc = &docs[d];
                let tokens = &doc.sentences[s];
                let states = ens.sentence.states(&with_bos(tokens))?;
                let mut noise = proxy_noise_rng(0xE7A1, 0, sentence_key(doc, s));
                let proxy = make_proxy(ae, tokens, *sigma, NormalizeMode::UnitL2, &mut noise)?;
                let e_cue = projector.forward(&proxy.vector);
                fused.push((states, e_cue, targets_of(tokens)));
            }
            decoder.nll_batch(&fused)
        }
        _ => {
            let context = ens.context.as_ref().unwrap();
            let decoder = ens.decoder.as_ref().unwrap();
            // metadata slot embeddings are constant per document
            let mut slot_cache: std::collections::HashMap<(usize, String), Array1<f32>> =
                std::collections::HashMap::new();
            let mut fused = Vec::with_capacity(chunk.len());
            for &(d, s) in chunk {
                let doc = &docs[d];
                let tokens = &doc.sentences[s];
                let states = ens.sentence.states(&with_bos(tokens))?;
                let ctx = context_for_mode(doc, s, &ens.vocab, mode, type_filter).sorted();
                let e_cue = if ctx.is_empty() {
                    context.null_context_vector()
                } else {
                    let k = ctx.len();
                    let mut g = ndarray::Array2::<f32>::zeros((k, context.cfg.out_dim));
                    for (i, (name, value)) in ctx.slots.iter().enumerate() {
                        if name == crate::corpus::PREVIOUS_SENTENCE {
                            g.row_mut(i)
                                .assign(&context.embed_context_string(&ens.vocab, value));
                        } else {
                            let key = (d, name.clone());
                            let gk = slot_cache.entry(key).or_insert_with(|| {
                                context.embed_context_string(&ens.vocab, value)
                            });
                            g.row_mut(i).assign(gk);
                        }
                    }
                    context.pool_slots(&g).0
                };
                fused.push((states, e_cue, targets_of(tokens)));
            }
            decoder.nll_batch(&fused)
        }
    }
}

fn sentence_key(doc: &Document, s: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in doc.id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h ^ (s as u64)
}

/// Evaluates with cue vectors read from an embedding store instead of the
/// context encoder; equal to the fresh computation when the store was
/// exported by the same encoder.
pub fn evaluate_ppl_with_embeddings(
    ens: &Ensemble,
    docs: &[Document],
    corpus_id: &str,
    store: &HashMap<(String, usize), Vec<f32>>,
) -> Result<PplReport> {
    let decoder = ens.decoder.as_ref().ok_or_else(|| CueError::IncompatibleMode {
        mode: "stored-embeddings".into(),
        reason: "ensemble has no decoder".into(),
    })?;
    let items: Vec<(usize, usize)> = crate::training::items_of(docs);
    let results: Vec<Result<(f64, usize)>> = items
        .par_iter()
        .map(|&(d, s)| {
            let doc = &docs[d];
            let vector = store.get(&(doc.id.clone(), s)).ok_or_else(|| {
                CueError::MissingCheckpoint(format!(
                    "embedding store has no entry for ({}, {s})",
                    doc.id
                ))
            })?;
            let tokens = &doc.sentences[s];
            let ids = with_bos(tokens);
            let targets = targets_of(tokens);
            let states = ens.sentence.states(&ids)?;
            let e_cue = Array1::from_vec(vector.clone());
            decoder.nll(&states, &e_cue, &targets)
        })
        .collect();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in results {
        let (t, c) = r?;
        total += t;
        count += c;
    }
    Ok(PplReport::from_sums(
        corpus_id,
        "stored-embeddings".into(),
        total,
        count,
    ))
}
