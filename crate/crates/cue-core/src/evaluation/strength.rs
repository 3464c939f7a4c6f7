//! Per-context-type strength: train with one contextual signal at a time
//! and rank types by perplexity gain.

use serde::{Deserialize, Serialize};

use super::ppl::{evaluate_ppl, ContextMode};
use crate::corpus::{Document, Vocabulary};
use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::sentence_encoder::SentenceEncoder;
use crate::training::{train_context_model, TrainSetup};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrengthRow {
    pub context_type: String,
    pub ppl: f64,
    /// Perplexity gain relative to the no-context baseline (positive is
    /// better).
    pub gain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrengthReport {
    pub baseline_ppl: f64,
    /// Sorted by gain, strongest signal first.
    pub rows: Vec<StrengthRow>,
}

/// Trains one single-signal model per context type and ranks types by the
/// perplexity gain over the no-context baseline.
pub fn per_context_strength(
    sentence: &SentenceEncoder,
    vocab: &Vocabulary,
    setup: &TrainSetup,
    types: &[String],
    train: &[Document],
    valid: &[Document],
    test: &[Document],
) -> Result<StrengthReport> {
    let base = Ensemble::new(vocab.clone(), sentence.clone());
    let baseline = evaluate_ppl(&base, test, "strength", &ContextMode::None, None)?.ppl;
    let mut rows = Vec::with_capacity(types.len());
    for (i, ty) in types.iter().enumerate() {
        let mut setup = setup.clone();
        setup.seed ^= (i as u64 + 1) << 32;
        let (ens, _) = train_context_model(
            sentence,
            vocab,
            &setup,
            Some(vec![ty.clone()]),
            train,
            valid,
        )?;
        let ppl = evaluate_ppl(
            &ens,
            test,
            "strength",
            &ContextMode::Full,
            Some(std::slice::from_ref(ty)),
        )?
        .ppl;
        rows.push(StrengthRow {
            context_type: ty.clone(),
            ppl,
            gain: baseline - ppl,
        });
    }
    rows.sort_by(|a, b| b.gain.partial_cmp(&a.gain).unwrap());
    Ok(StrengthReport {
        baseline_ppl: baseline,
        rows,
    })
}

/// Spearman rank correlation between two paired samples.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut out = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            out[i] = rank as f64;
        }
        out
    };
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
