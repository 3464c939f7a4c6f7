//! Per-phase freeze schedules.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::nn::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    PretrainLm,
    TrainAutoencoder,
    TrainContext,
    TrainContextOnly,
    TrainProxy,
    Adapt,
}

impl PhaseKind {
    pub fn name(&self) -> &'static str {
        match self {
            PhaseKind::PretrainLm => "pretrain-lm",
            PhaseKind::TrainAutoencoder => "train-autoencoder",
            PhaseKind::TrainContext => "train-context",
            PhaseKind::TrainContextOnly => "train-context-only",
            PhaseKind::TrainProxy => "train-proxy",
            PhaseKind::Adapt => "adapt",
        }
    }
}

/// Which parameter groups receive gradient updates in a phase. Everything
/// else is bit-identical before and after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSchedule {
    trainable: BTreeSet<ParamGroup>,
}

impl FreezeSchedule {
    pub fn new(trainable: impl IntoIterator<Item = ParamGroup>) -> Self {
        FreezeSchedule {
            trainable: trainable.into_iter().collect(),
        }
    }

    /// The default schedule of each phase. Adaptation trains exactly the
    /// context FFN and the context transformer.
    pub fn for_phase(kind: PhaseKind) -> Self {
        use ParamGroup::*;
        let groups: &[ParamGroup] = match kind {
            PhaseKind::PretrainLm => &[SentenceEncoder],
            PhaseKind::TrainAutoencoder => &[Autoencoder],
            PhaseKind::TrainContext | PhaseKind::TrainContextOnly => {
                &[Decoder, TextEncoder, ContextFfn, ContextTransformer]
            }
            PhaseKind::TrainProxy => &[Decoder, ProxyProjector],
            PhaseKind::Adapt => &[ContextFfn, ContextTransformer],
        };
        FreezeSchedule::new(groups.iter().copied())
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        self.trainable.iter().copied().collect()
    }

    /// The adaptation invariant: exactly context-FFN and context
    /// transformer are trainable.
    pub fn validate_for(&self, kind: PhaseKind) -> Result<()> {
        if kind == PhaseKind::Adapt {
            let expected: BTreeSet<ParamGroup> =
                [ParamGroup::ContextFfn, ParamGroup::ContextTransformer]
                    .into_iter()
                    .collect();
            if self.trainable != expected {
                return Err(CueError::InvalidConfig(format!(
                    "adaptation must train exactly context-ffn and context-transformer, got {:?}",
                    self.trainable
                )));
            }
        }
        if self.trainable.is_empty() {
            return Err(CueError::InvalidConfig(
                "freeze schedule has no trainable groups".into(),
            ));
        }
        Ok(())
    }
}
