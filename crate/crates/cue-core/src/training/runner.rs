//! High-level experiment runners: build and train whole model variants,
//! execute adaptation-matrix cells with shared-checkpoint caching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::freeze::PhaseKind;
use super::matrix::{ExperimentCell, TestSpec, TrainSpec};
use super::phase::{run_phase, PhaseConfig, PhaseOutcome};
use crate::context_encoder::{ContextEncoder, ContextEncoderConfig};
use crate::corpus::{Document, Vocabulary};
use crate::decoder::{ContextOnlyHead, Decoder, DecoderConfig};
use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::evaluation::ppl::{evaluate_ppl, ContextMode};
use crate::nn::OptimizerConfig;
use crate::proxy::{ProxyProjector, UnigramAutoencoder};
use crate::sentence_encoder::SentenceEncoder;

/// Shared configuration for experiment-scale model building.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSetup {
    pub ctx_cfg: ContextEncoderConfig,
    pub dec_cfg: DecoderConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Initialize the decoder head from the frozen sentence encoder so
    /// training starts at no-context parity.
    pub warm_start: bool,
}

/// Joint context training: fresh context encoder and decoder over a frozen
/// sentence encoder.
pub fn train_context_model(
    sentence: &SentenceEncoder,
    vocab: &Vocabulary,
    setup: &TrainSetup,
    context_types: Option<Vec<String>>,
    train: &[Document],
    valid: &[Document],
) -> Result<(Ensemble, PhaseOutcome)> {
    let mut ens = Ensemble::new(vocab.clone(), sentence.clone());
    ens.context = Some(ContextEncoder::new(setup.ctx_cfg.clone(), setup.seed)?);
    let mut decoder = Decoder::new(setup.dec_cfg.clone(), setup.seed ^ 0xD0)?;
    if setup.warm_start {
        decoder.warm_start_from(sentence)?;
    }
    ens.decoder = Some(decoder);
    let mut cfg = PhaseConfig::new(PhaseKind::TrainContext, setup.seed);
    cfg.optimizer = setup.optimizer.clone();
    cfg.context_types = context_types;
    let outcome = run_phase(&mut ens, &cfg, train, valid)?;
    Ok((ens, outcome))
}

/// Context-only variant: fresh context encoder plus the constant-prediction
/// head.
pub fn train_context_only_model(
    sentence: &SentenceEncoder,
    vocab: &Vocabulary,
    setup: &TrainSetup,
    head_hidden: usize,
    train: &[Document],
    valid: &[Document],
) -> Result<(Ensemble, PhaseOutcome)> {
    let mut ens = Ensemble::new(vocab.clone(), sentence.clone());
    ens.context = Some(ContextEncoder::new(setup.ctx_cfg.clone(), setup.seed)?);
    ens.context_only = Some(ContextOnlyHead::new(
        setup.ctx_cfg.out_dim,
        head_hidden,
        vocab.len(),
        setup.seed ^ 0xC0,
    ));
    let mut cfg = PhaseConfig::new(PhaseKind::TrainContextOnly, setup.seed);
    cfg.optimizer = setup.optimizer.clone();
    let outcome = run_phase(&mut ens, &cfg, train, valid)?;
    Ok((ens, outcome))
}

/// Proxy training: fresh decoder and projector primed with noisy oracle
/// unigram embeddings; no context annotations are touched.
pub fn train_proxy_model(
    sentence: &SentenceEncoder,
    vocab: &Vocabulary,
    autoencoder: &UnigramAutoencoder,
    setup: &TrainSetup,
    sigma: f32,
    train: &[Document],
    valid: &[Document],
) -> Result<(Ensemble, PhaseOutcome)> {
    let mut ens = Ensemble::new(vocab.clone(), sentence.clone());
    ens.autoencoder = Some(autoencoder.clone());
    let mut decoder = Decoder::new(setup.dec_cfg.clone(), setup.seed ^ 0xD0)?;
    if setup.warm_start {
        decoder.warm_start_from(sentence)?;
    }
    ens.decoder = Some(decoder);
    ens.projector = Some(ProxyProjector::new(
        autoencoder.cfg.bottleneck,
        setup.dec_cfg.dim,
        setup.seed ^ 0xF0,
    ));
    ens.sigma = Some(sigma);
    let mut cfg = PhaseConfig::new(PhaseKind::TrainProxy, setup.seed);
    cfg.optimizer = setup.optimizer.clone();
    cfg.sigma = sigma;
    let outcome = run_phase(&mut ens, &cfg, train, valid)?;
    Ok((ens, outcome))
}

/// Adaptation: retrain only the context-encoder interior (FFN + context
/// transformer) against the frozen decoder. The context encoder continues
/// from `ens.context` when present, otherwise starts fresh with a frozen
/// randomly initialized text encoder.
pub fn adapt_model(
    mut ens: Ensemble,
    ctx_cfg: &ContextEncoderConfig,
    optimizer: &OptimizerConfig,
    seed: u64,
    context_types: Option<Vec<String>>,
    train: &[Document],
    valid: &[Document],
) -> Result<(Ensemble, PhaseOutcome)> {
    if ens.context.is_none() {
        ens.context = Some(ContextEncoder::new(ctx_cfg.clone(), seed ^ 0xAD)?);
    }
    let mut cfg = PhaseConfig::new(PhaseKind::Adapt, seed);
    cfg.optimizer = optimizer.clone();
    cfg.context_types = context_types;
    let outcome = run_phase(&mut ens, &cfg, train, valid)?;
    Ok((ens, outcome))
}

/// Inputs for executing adaptation-matrix cells.
pub struct MatrixInputs<'a> {
    pub sentence: &'a SentenceEncoder,
    pub vocab: &'a Vocabulary,
    pub autoencoder: &'a UnigramAutoencoder,
    pub setup: TrainSetup,
    pub adapt_optimizer: OptimizerConfig,
    pub sigma: f32,
    pub context_train: &'a [Document],
    pub context_adapt: &'a [Document],
    pub valid: &'a [Document],
    pub test: &'a [Document],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: ExperimentCell,
    pub ppl: f64,
}

/// Executes matrix cells, caching shared training runs (the word-only
/// baseline, each distinct context-type training set, the proxy decoder).
pub fn run_experiment_matrix(
    inputs: &MatrixInputs<'_>,
    cells: &[ExperimentCell],
) -> Result<Vec<CellResult>> {
    let mut trained: BTreeMap<String, Ensemble> = BTreeMap::new();
    let mut results = Vec::with_capacity(cells.len());

    for cell in cells {
        let key = train_key(&cell.train);
        if !trained.contains_key(&key) {
            let ens = match &cell.train {
                TrainSpec::None => Ensemble::new(inputs.vocab.clone(), inputs.sentence.clone()),
                TrainSpec::Proxy => {
                    train_proxy_model(
                        inputs.sentence,
                        inputs.vocab,
                        inputs.autoencoder,
                        &inputs.setup,
                        inputs.sigma,
                        inputs.context_train,
                        inputs.valid,
                    )?
                    .0
                }
                TrainSpec::Types(types) => {
                    train_context_model(
                        inputs.sentence,
                        inputs.vocab,
                        &inputs.setup,
                        Some(types.clone()),
                        inputs.context_train,
                        inputs.valid,
                    )?
                    .0
                }
            };
            trained.insert(key.clone(), ens);
        }
        let base = trained.get(&key).expect("just inserted");

        // adaptation runs continue from the trained model's context encoder
        let evaluated: Ensemble = if let Some(adapt_types) = &cell.adapt {
            let (adapted, _) = adapt_model(
                base.clone(),
                &inputs.setup.ctx_cfg,
                &inputs.adapt_optimizer,
                inputs.setup.seed ^ (0xA0 + cell.row as u64) ^ ((cell.trial as u64) << 8),
                Some(adapt_types.clone()),
                inputs.context_adapt,
                inputs.valid,
            )?;
            adapted
        } else {
            base.clone()
        };

        let ppl = match &cell.test {
            TestSpec::WordOnly => {
                evaluate_ppl(&evaluated, inputs.test, "matrix", &ContextMode::None, None)?.ppl
            }
            TestSpec::Proxy => {
                evaluate_ppl(
                    &evaluated,
                    inputs.test,
                    "matrix",
                    &ContextMode::ProxyOracle {
                        sigma: inputs.sigma,
                    },
                    None,
                )?
                .ppl
            }
            TestSpec::Types(types) => {
                evaluate_ppl(
                    &evaluated,
                    inputs.test,
                    "matrix",
                    &ContextMode::Full,
                    Some(types),
                )?
                .ppl
            }
        };
        results.push(CellResult {
            cell: cell.clone(),
            ppl,
        });
    }
    Ok(results)
}

fn train_key(spec: &TrainSpec) -> String {
    match spec {
        TrainSpec::None => "none".into(),
        TrainSpec::Proxy => "proxy".into(),
        TrainSpec::Types(t) => format!("types:{}", t.join(",")),
    }
}
