//! Model ensemble assembly, per-module checkpoint wrappers and parameter
//! accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{apply_payload, load_model, save_model};
use crate::context_encoder::{ContextEncoder, ContextEncoderConfig};
use crate::corpus::Vocabulary;
use crate::decoder::{ContextOnlyHead, Decoder, DecoderConfig};
use crate::error::{CueError, Result};
use crate::nn::ParamGroup;
use crate::proxy::{AutoencoderConfig, ProxyProjector, UnigramAutoencoder};
use crate::sentence_encoder::{SentenceEncoder, SentenceEncoderConfig};

pub const KIND_SENTENCE: &str = "sentence-encoder";
pub const KIND_CONTEXT: &str = "context-encoder";
pub const KIND_DECODER: &str = "decoder";
pub const KIND_CONTEXT_ONLY: &str = "context-only-head";
pub const KIND_AUTOENCODER: &str = "unigram-autoencoder";
pub const KIND_PROJECTOR: &str = "proxy-projector";

/// Everything evaluation and training phases operate on. Optional parts
/// are absent until the corresponding phase has produced them.
#[derive(Clone)]
pub struct Ensemble {
    pub vocab: Vocabulary,
    pub sentence: SentenceEncoder,
    pub context: Option<ContextEncoder>,
    pub decoder: Option<Decoder>,
    pub context_only: Option<ContextOnlyHead>,
    pub autoencoder: Option<UnigramAutoencoder>,
    pub projector: Option<ProxyProjector>,
    /// Proxy noise level recorded by proxy training.
    pub sigma: Option<f32>,
}

impl Ensemble {
    pub fn new(vocab: Vocabulary, sentence: SentenceEncoder) -> Self {
        Ensemble {
            vocab,
            sentence,
            context: None,
            decoder: None,
            context_only: None,
            autoencoder: None,
            projector: None,
            sigma: None,
        }
    }

    /// Exact scalar counts per parameter group across every present model;
    /// groups cover the stores disjointly by construction.
    pub fn count_parameters(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out: BTreeMap<ParamGroup, usize> = BTreeMap::new();
        let mut add = |counts: BTreeMap<ParamGroup, usize>| {
            for (g, c) in counts {
                *out.entry(g).or_insert(0) += c;
            }
        };
        add(self.sentence.store.count_by_group());
        if let Some(m) = &self.context {
            add(m.store.count_by_group());
        }
        if let Some(m) = &self.decoder {
            add(m.store.count_by_group());
        }
        if let Some(m) = &self.context_only {
            add(m.store.count_by_group());
        }
        if let Some(m) = &self.autoencoder {
            add(m.store.count_by_group());
        }
        if let Some(m) = &self.projector {
            add(m.store.count_by_group());
        }
        out
    }

    pub fn total_parameters(&self) -> usize {
        self.count_parameters().values().sum()
    }
}

pub fn save_sentence_encoder(enc: &SentenceEncoder, path: &Path) -> Result<String> {
    save_model(path, KIND_SENTENCE, &enc.cfg, BTreeMap::new(), &enc.store)
}

pub fn load_sentence_encoder(path: &Path, expected_vocab: Option<usize>) -> Result<SentenceEncoder> {
    let loaded = load_model(path)?;
    expect_kind(&loaded.header.kind, KIND_SENTENCE, path)?;
    let cfg: SentenceEncoderConfig = parse_config(&loaded.header.config, path)?;
    check_vocab(cfg.vocab_size, expected_vocab, path)?;
    let mut enc = SentenceEncoder::new(cfg, 0)?;
    apply_payload(&mut enc.store, &loaded, path)?;
    Ok(enc)
}

pub fn save_context_encoder(enc: &ContextEncoder, path: &Path) -> Result<String> {
    save_model(path, KIND_CONTEXT, &enc.cfg, BTreeMap::new(), &enc.store)
}

pub fn load_context_encoder(path: &Path, expected_vocab: Option<usize>) -> Result<ContextEncoder> {
    let loaded = load_model(path)?;
    expect_kind(&loaded.header.kind, KIND_CONTEXT, path)?;
    let cfg: ContextEncoderConfig = parse_config(&loaded.header.config, path)?;
    check_vocab(cfg.vocab_size, expected_vocab, path)?;
    let mut enc = ContextEncoder::new(cfg, 0)?;
    apply_payload(&mut enc.store, &loaded, path)?;
    Ok(enc)
}

/// Saves a decoder; the fusion mode travels in the config, the proxy noise
/// level in the header extras.
pub fn save_decoder(dec: &Decoder, sigma: Option<f32>, path: &Path) -> Result<String> {
    let mut extra = BTreeMap::new();
    extra.insert(
        "sigma".to_string(),
        serde_json::to_value(sigma).map_err(|e| CueError::json("sigma", e))?,
    );
    save_model(path, KIND_DECODER, &dec.cfg, extra, &dec.store)
}

pub fn load_decoder(path: &Path, expected_vocab: Option<usize>) -> Result<(Decoder, Option<f32>)> {
    let loaded = load_model(path)?;
    expect_kind(&loaded.header.kind, KIND_DECODER, path)?;
    let cfg: DecoderConfig = parse_config(&loaded.header.config, path)?;
    check_vocab(cfg.vocab_size, expected_vocab, path)?;
    let sigma = loaded
        .header
        .extra
        .get("sigma")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(None);
    let mut dec = Decoder::new(cfg, 0)?;
    apply_payload(&mut dec.store, &loaded, path)?;
    Ok((dec, sigma))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContextOnlyConfig {
    dim: usize,
    hidden: usize,
    vocab_size: usize,
}

pub fn save_context_only(head: &ContextOnlyHead, path: &Path) -> Result<String> {
    let cfg = ContextOnlyConfig {
        dim: head.dim,
        hidden: head.hidden,
        vocab_size: head.vocab_size,
    };
    save_model(path, KIND_CONTEXT_ONLY, &cfg, BTreeMap::new(), &head.store)
}

pub fn load_context_only(path: &Path, expected_vocab: Option<usize>) -> Result<ContextOnlyHead> {
    let loaded = load_model(path)?;
    expect_kind(&loaded.header.kind, KIND_CONTEXT_ONLY, path)?;
    let cfg: ContextOnlyConfig = parse_config(&loaded.header.config, path)?;
    check_vocab(cfg.vocab_size, expected_vocab, path)?;
    let mut head = ContextOnlyHead::new(cfg.dim, cfg.hidden, cfg.vocab_size, 0);
    apply_payload(&mut head.store, &loaded, path)?;
    Ok(head)
}

pub fn save_autoencoder(ae: &UnigramAutoencoder, path: &Path) -> Result<String> {
    save_model(path, KIND_AUTOENCODER, &ae.cfg, BTreeMap::new(), &ae.store)
}

pub fn load_autoencoder(path: &Path, expected_vocab: Option<usize>) -> Result<UnigramAutoencoder> {
    let loaded = load_model(path)?;
    expect_kind(&loaded.header.kind, KIND_AUTOENCODER, path)?;
    let cfg: AutoencoderConfig = parse_config(&loaded.header.config, path)?;
    check_vocab(cfg.vocab_size, expected_vocab, path)?;
    let mut ae = UnigramAutoencoder::new(cfg, 0);
    apply_payload(&mut ae.store, &loaded, path)?;
    Ok(ae)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjectorConfig {
    in_dim: usize,
    out_dim: usize,
}

pub fn save_projector(proj: &ProxyProjector, path: &Path) -> Result<String> {
    let cfg = ProjectorConfig {
        in_dim: proj.in_dim,
        out_dim: proj.out_dim,
    };
    save_model(path, KIND_PROJECTOR, &cfg, BTreeMap::new(), &proj.store)
}

pub fn load_projector(path: &Path) -> Result<ProxyProjector> {
    let loaded = load_model(path)?;
    expect_kind(&loaded.header.kind, KIND_PROJECTOR, path)?;
    let cfg: ProjectorConfig = parse_config(&loaded.header.config, path)?;
    let mut proj = ProxyProjector::new(cfg.in_dim, cfg.out_dim, 0);
    apply_payload(&mut proj.store, &loaded, path)?;
    Ok(proj)
}

fn expect_kind(found: &str, expected: &str, path: &Path) -> Result<()> {
    if found != expected {
        return Err(CueError::IncompatibleCheckpoint {
            path: path.display().to_string(),
            reason: format!("kind `{found}`, expected `{expected}`"),
        });
    }
    Ok(())
}

fn parse_config<T: serde::de::DeserializeOwned>(
    value: &serde_json::Value,
    path: &Path,
) -> Result<T> {
    serde_json::from_value(value.clone())
        .map_err(|e| CueError::json(format!("config of {}", path.display()), e))
}

fn check_vocab(actual: usize, expected: Option<usize>, path: &Path) -> Result<()> {
    if let Some(expected) = expected {
        if actual != expected {
            return Err(CueError::IncompatibleCheckpoint {
                path: path.display().to_string(),
                reason: format!("vocabulary size {actual}, expected {expected}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sentence_encoder::SentenceEncoderVariant;

    fn tiny_sentence_cfg(vocab: usize) -> SentenceEncoderConfig {
        SentenceEncoderConfig {
            variant: SentenceEncoderVariant::Transformer,
            layers: 1,
            dim: 16,
            heads: 2,
            ffn_mult: 1,
            max_len: 8,
            vocab_size: vocab,
            tied_head: false,
        }
    }

    #[test]
    fn vocab_mismatch_is_rejected_on_load() {
        let enc = SentenceEncoder::new(tiny_sentence_cfg(64), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_sentence_encoder(&enc, &path).unwrap();
        assert!(load_sentence_encoder(&path, Some(64)).is_ok());
        match load_sentence_encoder(&path, Some(100)) {
            Err(CueError::IncompatibleCheckpoint { .. }) => {}
            Err(other) => panic!("unexpected error {other:?}"),
            Ok(_) => panic!("vocab mismatch must be rejected"),
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let enc = SentenceEncoder::new(tiny_sentence_cfg(64), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_sentence_encoder(&enc, &path).unwrap();
        assert!(load_decoder(&path, None).is_err());
    }

    #[test]
    fn parameter_counts_cover_groups_disjointly() {
        let vocab = Vocabulary::build(["a b c d e f g h"], 64, 1).unwrap();
        let v = vocab.len();
        let mut ens = Ensemble::new(vocab, SentenceEncoder::new(tiny_sentence_cfg(v), 1).unwrap());
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
                    max_len: 8,
                    vocab_size: v,
                    state_dim: 16,
                    fusion: crate::decoder::FusionMode::CrossAttention,
                },
                3,
            )
            .unwrap(),
        );
        ens.autoencoder = Some(UnigramAutoencoder::new(
            AutoencoderConfig {
                vocab_size: v,
                hidden: 8,
                bottleneck: 4,
            },
            4,
        ));
        ens.projector = Some(ProxyProjector::new(4, 16, 5));

        let counts = ens.count_parameters();
        let total: usize = counts.values().sum();
        assert_eq!(total, ens.total_parameters());
        let by_store = ens.sentence.store.total_len()
            + ens.context.as_ref().unwrap().store.total_len()
            + ens.decoder.as_ref().unwrap().store.total_len()
            + ens.autoencoder.as_ref().unwrap().store.total_len()
            + ens.projector.as_ref().unwrap().store.total_len();
        assert_eq!(total, by_store, "groups must cover all parameters exactly");
        for group in [
            ParamGroup::SentenceEncoder,
            ParamGroup::TextEncoder,
            ParamGroup::ContextFfn,
            ParamGroup::ContextTransformer,
            ParamGroup::Decoder,
            ParamGroup::ProxyProjector,
            ParamGroup::Autoencoder,
        ] {
            assert!(counts[&group] > 0, "group {group:?} is empty");
        }
    }
}
