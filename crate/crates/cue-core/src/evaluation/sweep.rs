//! Proxy noise sweep: how much information the proxy embedding carries as
//! a function of the Gaussian noise level, and how well adaptation recovers
//! real context on top of each proxy-trained decoder.

use serde::{Deserialize, Serialize};

use super::ppl::{evaluate_ppl, ContextMode};
use crate::corpus::{Document, Vocabulary};
use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::proxy::UnigramAutoencoder;
use crate::sentence_encoder::SentenceEncoder;
use crate::training::{adapt_model, train_proxy_model, TrainSetup};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f32,
    /// Proxy-trained decoder evaluated with noisy proxies (oracle curve).
    pub proxy_tested_ppl: f64,
    /// Same decoder after adapting a real context encoder onto it.
    pub adapted_ppl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// No-context reference line.
    pub reference_no_context: f64,
    /// Jointly trained context model reference line.
    pub reference_joint: f64,
    /// Grid sigma where the proxy curve is closest to the joint reference:
    /// the noise level at which the proxy is about as informative as real
    /// context.
    pub calibrated_sigma: f32,
}

pub struct SweepInputs<'a> {
    pub sentence: &'a SentenceEncoder,
    pub vocab: &'a Vocabulary,
    pub autoencoder: &'a UnigramAutoencoder,
    pub setup: TrainSetup,
    pub adapt_optimizer: crate::nn::OptimizerConfig,
    pub proxy_train: &'a [Document],
    pub context_adapt: &'a [Document],
    pub valid: &'a [Document],
    pub test: &'a [Document],
    /// PPL of the jointly trained context model (the lower reference).
    pub reference_joint: f64,
}

pub fn noise_sweep(inputs: &SweepInputs<'_>, grid: &[f32]) -> Result<SweepReport> {
    let base = Ensemble::new(inputs.vocab.clone(), inputs.sentence.clone());
    let reference_no_context =
        evaluate_ppl(&base, inputs.test, "sweep", &ContextMode::None, None)?.ppl;

    let mut points = Vec::with_capacity(grid.len());
    for &sigma in grid {
        let (proxy_ens, _) = train_proxy_model(
            inputs.sentence,
            inputs.vocab,
            inputs.autoencoder,
            &inputs.setup,
            sigma,
            inputs.proxy_train,
            inputs.valid,
        )?;
        let proxy_tested_ppl = evaluate_ppl(
            &proxy_ens,
            inputs.test,
            "sweep",
            &ContextMode::ProxyOracle { sigma },
            None,
        )?
        .ppl;
        let (adapted, _) = adapt_model(
            proxy_ens,
            &inputs.setup.ctx_cfg,
            &inputs.adapt_optimizer,
            inputs.setup.seed ^ 0x51EE ^ ((sigma.to_bits() as u64) << 1),
            None,
            inputs.context_adapt,
            inputs.valid,
        )?;
        let adapted_ppl =
            evaluate_ppl(&adapted, inputs.test, "sweep", &ContextMode::Full, None)?.ppl;
        points.push(SweepPoint {
            sigma,
            proxy_tested_ppl,
            adapted_ppl,
        });
    }

    let calibrated_sigma = points
        .iter()
        .min_by(|a, b| {
            let da = (a.proxy_tested_ppl - inputs.reference_joint).abs();
            let db = (b.proxy_tested_ppl - inputs.reference_joint).abs();
            da.partial_cmp(&db).unwrap()
        })
        .map(|p| p.sigma)
        .unwrap_or(0.0);

    Ok(SweepReport {
        points,
        reference_no_context,
        reference_joint: inputs.reference_joint,
        calibrated_sigma,
    })
}
