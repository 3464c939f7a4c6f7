//! Cache-effect analysis: are tokens that appear in the sentence's context
//! strings predicted disproportionately better with context?

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{context_set_for, Document};
use crate::ensemble::Ensemble;
use crate::error::{CueError, Result};
use crate::sentence_encoder::{targets_of, with_bos};

/// Token-level cache analysis. Membership is surface-form containment
/// after shared tokenization: a target token is in-cache when its id
/// appears in any of the sentence's context strings. The two bins
/// partition all scored tokens; relative gain is the per-bin mean-NLL
/// change (NLL_none - NLL_context) / NLL_none.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheAnalysis {
    pub in_cache_fraction: f64,
    pub in_cache_gain: f64,
    pub out_cache_gain: f64,
    pub in_cache_tokens: usize,
    pub out_cache_tokens: usize,
    /// Fraction of scored tokens found in each context type's string.
    pub per_type_hits: BTreeMap<String, f64>,
    pub formula: String,
}

/// Requires a contextual ensemble (context encoder + decoder); the same
/// sentence encoder provides the no-context comparison path.
pub fn cache_analysis(ens: &Ensemble, docs: &[Document]) -> Result<CacheAnalysis> {
    let context = ens
        .context
        .as_ref()
        .ok_or_else(|| CueError::IncompatibleMode {
            mode: "cache-analysis".into(),
            reason: "ensemble has no context encoder".into(),
        })?;
    let decoder = ens
        .decoder
        .as_ref()
        .ok_or_else(|| CueError::IncompatibleMode {
            mode: "cache-analysis".into(),
            reason: "ensemble has no decoder".into(),
        })?;

    struct SentenceBins {
        in_nll_none: f64,
        in_nll_ctx: f64,
        in_count: usize,
        out_nll_none: f64,
        out_nll_ctx: f64,
        out_count: usize,
        type_hits: BTreeMap<String, usize>,
    }

    let items = crate::training::items_of(docs);
    let per_sentence: Vec<Result<SentenceBins>> = items
        .par_iter()
        .map(|&(d, s)| {
            let doc = &docs[d];
            let tokens = &doc.sentences[s];
            let ids = with_bos(tokens);
            let targets = targets_of(tokens);
            let ctx = context_set_for(doc, s, &ens.vocab, None);

            // tokenize each context string with the shared vocabulary
            let mut per_type_ids: Vec<(String, HashSet<u32>)> = Vec::with_capacity(ctx.len());
            let mut union: HashSet<u32> = HashSet::new();
            for (name, value) in &ctx.slots {
                let set: HashSet<u32> = ens.vocab.encode(value, usize::MAX).into_iter().collect();
                union.extend(set.iter().copied());
                per_type_ids.push((name.clone(), set));
            }

            let base = ens.sentence.encode_sentence(&ids)?;
            let states = ens.sentence.states(&ids)?;
            let (e_cue, _) = context.encode_context_set(&ens.vocab, &ctx);
            let contextual = decoder.decode(&states, &e_cue)?;

            let mut bins = SentenceBins {
                in_nll_none: 0.0,
                in_nll_ctx: 0.0,
                in_count: 0,
                out_nll_none: 0.0,
                out_nll_ctx: 0.0,
                out_count: 0,
                type_hits: BTreeMap::new(),
            };
            for (i, &t) in targets.iter().enumerate() {
                if t == crate::corpus::PAD {
                    continue;
                }
                let nll_none = -(base.logprobs[[i, t as usize]] as f64);
                let nll_ctx = -(contextual.logprobs[[i, t as usize]] as f64);
                if union.contains(&t) {
                    bins.in_nll_none += nll_none;
                    bins.in_nll_ctx += nll_ctx;
                    bins.in_count += 1;
                    for (name, set) in &per_type_ids {
                        if set.contains(&t) {
                            *bins.type_hits.entry(name.clone()).or_insert(0) += 1;
                        }
                    }
                } else {
                    bins.out_nll_none += nll_none;
                    bins.out_nll_ctx += nll_ctx;
                    bins.out_count += 1;
                }
            }
            Ok(bins)
        })
        .collect();

    let mut in_none = 0.0;
    let mut in_ctx = 0.0;
    let mut in_count = 0usize;
    let mut out_none = 0.0;
    let mut out_ctx = 0.0;
    let mut out_count = 0usize;
    let mut type_hits: BTreeMap<String, usize> = BTreeMap::new();
    for bins in per_sentence {
        let b = bins?;
        in_none += b.in_nll_none;
        in_ctx += b.in_nll_ctx;
        in_count += b.in_count;
        out_none += b.out_nll_none;
        out_ctx += b.out_nll_ctx;
        out_count += b.out_count;
        for (name, hits) in b.type_hits {
            *type_hits.entry(name).or_insert(0) += hits;
        }
    }

    let total = (in_count + out_count) as f64;
    let gain = |none_sum: f64, ctx_sum: f64, count: usize| -> f64 {
        if count == 0 {
            return 0.0;
        }
        let none_mean = none_sum / count as f64;
        let ctx_mean = ctx_sum / count as f64;
        (none_mean - ctx_mean) / none_mean
    };
    Ok(CacheAnalysis {
        in_cache_fraction: in_count as f64 / total.max(1.0),
        in_cache_gain: gain(in_none, in_ctx, in_count),
        out_cache_gain: gain(out_none, out_ctx, out_count),
        in_cache_tokens: in_count,
        out_cache_tokens: out_count,
        per_type_hits: type_hits
            .into_iter()
            .map(|(name, hits)| (name, hits as f64 / total.max(1.0)))
            .collect(),
        formula: "per-bin relative gain: (mean NLL without context - mean NLL with context) / mean NLL without context".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_encoder::{ContextEncoder, ContextEncoderConfig};
    use crate::corpus::{TokenSequence, Vocabulary};
    use crate::decoder::{Decoder, DecoderConfig, FusionMode};
    use crate::sentence_encoder::{SentenceEncoder, SentenceEncoderConfig, SentenceEncoderVariant};

    #[test]
    fn full_containment_gives_fraction_one() {
        let vocab = Vocabulary::build(["aa bb cc dd"], 64, 1).unwrap();
        let v = vocab.len();
        let sentence = SentenceEncoder::new(
            SentenceEncoderConfig {
                variant: SentenceEncoderVariant::Transformer,
                layers: 1,
                dim: 16,
                heads: 2,
                ffn_mult: 1,
                max_len: 16,
                vocab_size: v,
                tied_head: false,
            },
            1,
        )
        .unwrap();
        let mut ens = Ensemble::new(vocab.clone(), sentence);
        ens.context = Some(
            ContextEncoder::new(
                ContextEncoderConfig {
                    text_layers: 1,
                    text_dim: 16,
                    text_heads: 2,
                    text_ffn_mult: 1,
                    max_context_len: 8,
                    ffn_hidden: 16,
                    ctx_layers: 1,
                    ctx_heads: 2,
                    ctx_ffn_mult: 1,
                    out_dim: 16,
                    vocab_size: v,
                },
                2,
            )
            .unwrap(),
        );
        ens.decoder = Some(
            Decoder::new(
                DecoderConfig {
                    layers: 1,
                    dim: 16,
                    heads: 2,
                    ffn_mult: 1,
                    max_len: 16,
                    vocab_size: v,
                    state_dim: 16,
                    fusion: FusionMode::CrossAttention,
                },
                3,
            )
            .unwrap(),
        );
        // context contains every sentence token, plus <eos> so the EOS slot
        // is also a cache hit
        let docs = vec![Document {
            id: "d0".into(),
            sentences: vec![TokenSequence::new(vocab.encode("aa bb cc", 8))],
            context: [("title".to_string(), "aa bb cc dd <eos>".to_string())]
                .into_iter()
                .collect(),
        }];
        let analysis = cache_analysis(&ens, &docs).unwrap();
        assert!(
            (analysis.in_cache_fraction - 1.0).abs() < 1e-12,
            "fraction {}",
            analysis.in_cache_fraction
        );
        assert_eq!(analysis.out_cache_tokens, 0);
        assert!(analysis.per_type_hits["title"] > 0.99);
    }
}
