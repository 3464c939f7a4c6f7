//! Ablation suite over architecture variants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ppl::{evaluate_ppl, ContextMode};
use crate::corpus::{context_set_for, Document};
use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::sentence_encoder::targets_of;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ppl: Option<f64>,
    pub note: Option<String>,
}

/// Trained variants feeding the suite; any may be absent, which marks the
/// row absent without failing the suite.
pub struct AblationVariants<'a> {
    /// Cross-attention decoder with the full context encoder.
    pub full: Option<&'a Ensemble>,
    /// Context encoder without its transformer (mean of projected slots).
    pub no_context_transformer: Option<&'a Ensemble>,
    /// Concatenation fusion (no decoder transformer).
    pub concat_fusion: Option<&'a Ensemble>,
    /// Context-only predictor (no sentence inputs).
    pub context_only: Option<&'a Ensemble>,
    /// The bare sentence LM used for the no-context row.
    pub base: &'a Ensemble,
}

/// Mean NLL of the context-only head over a split.
pub fn context_only_ppl(ens: &Ensemble, docs: &[Document]) -> Result<f64> {
    let context = ens.context.as_ref().ok_or_else(|| {
        crate::CueError::MissingCheckpoint("context encoder for context-only eval".into())
    })?;
    let head = ens.context_only.as_ref().ok_or_else(|| {
        crate::CueError::MissingCheckpoint("context-only head".into())
    })?;
    let items = crate::training::items_of(docs);
    let sums: Vec<Result<(f64, usize)>> = items
        .par_iter()
        .map(|&(d, s)| {
            let ctx = context_set_for(&docs[d], s, &ens.vocab, None);
            let (e_cue, _) = context.encode_context_set(&ens.vocab, &ctx);
            Ok(head.nll(&e_cue, &targets_of(&docs[d].sentences[s])))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in sums {
        let (t, c) = r?;
        total += t;
        count += c;
    }
    Ok((total / count.max(1) as f64).exp())
}

/// Runs every ablation row that has a checkpoint; rows without one are
/// marked absent. The no-context row is by construction the same
/// computation as mode `none`.
pub fn run_ablation_suite(variants: &AblationVariants<'_>, docs: &[Document]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let eval_full = |ens: &Ensemble| -> Result<f64> {
        Ok(evaluate_ppl(ens, docs, "ablation", &ContextMode::Full, None)?.ppl)
    };
    let mut push = |name: &str, ppl: Result<Option<f64>>, note: Option<String>| -> Result<()> {
        rows.push(AblationRow {
            name: name.to_string(),
            ppl: ppl?,
            note,
        });
        Ok(())
    };

    push(
        "full",
        variants.full.map(eval_full).transpose(),
        None,
    )?;
    push(
        "no-context-transformer",
        variants.no_context_transformer.map(eval_full).transpose(),
        Some("mean of projected slot embeddings".into()),
    )?;
    push(
        "no-decoder-transformer",
        variants.concat_fusion.map(eval_full).transpose(),
        Some("cue vector concatenated before the logit layer".into()),
    )?;
    push(
        "no-pretrained-text-encoder",
        None::<Result<f64>>.transpose(),
        Some("the text encoder is trained from scratch here by default; this row equals `full`".into()),
    )?;
    push(
        "no-context",
        Some(evaluate_ppl(variants.base, docs, "ablation", &ContextMode::None, None).map(|r| r.ppl))
            .transpose(),
        Some("identical to evaluate_ppl with mode none".into()),
    )?;
    push(
        "no-sentence-inputs",
        variants.context_only.map(|e| context_only_ppl(e, docs)).transpose(),
        Some("constant prediction per sentence".into()),
    )?;
    for row in rows.iter_mut() {
        if row.ppl.is_none() && row.name != "no-pretrained-text-encoder" {
            let note = row.note.get_or_insert_with(String::new);
            if !note.is_empty() {
                note.push_str("; ");
            }
            note.push_str("checkpoint absent");
        }
    }
    Ok(rows)
}
