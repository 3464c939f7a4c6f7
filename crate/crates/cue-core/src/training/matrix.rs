//! The adaptation experiment matrix: context types are partitioned into a
//! training set A and an adaptation set B, and eleven configurations cover
//! word-only, proxy, zero-shot, adapted and jointly trained models for
//! both the replacement (B) and extension (A+B) scenarios.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainSpec {
    /// No contextual model at all: the word-only baseline.
    None,
    /// Proxy-primed decoder (no real context during training).
    Proxy,
    /// Joint context training restricted to these types.
    Types(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSpec {
    WordOnly,
    Proxy,
    Types(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentCell {
    /// Row number 1..=11.
    pub row: usize,
    pub description: String,
    pub trial: usize,
    pub train: TrainSpec,
    /// Context types adapted onto the frozen decoder, when present.
    pub adapt: Option<Vec<String>>,
    pub test: TestSpec,
}

/// One random partition of the context types into non-empty halves.
pub fn partition_types(types: &[String], trial: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if types.len() < 2 {
        return Err(CueError::InvalidConfig(
            "need at least 2 context types to partition".into(),
        ));
    }
    let mut shuffled = types.to_vec();
    let mut r = rng::derive_indexed(seed, "type-partition", trial as u64);
    shuffled.shuffle(&mut r);
    let cut = 1 + (trial + shuffled.len() / 2) % (shuffled.len() - 1);
    let (a, b) = shuffled.split_at(cut);
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort();
    b.sort();
    Ok((a, b))
}

/// Emits the full runnable matrix: eleven rows per trial.
pub fn build_adaptation_experiment(
    types: &[String],
    trials: usize,
    seed: u64,
) -> Result<Vec<ExperimentCell>> {
    if types.len() < 2 {
        return Err(CueError::InvalidConfig(
            "need at least 2 context types for the adaptation experiment".into(),
        ));
    }
    let mut all = types.to_vec();
    all.sort();
    let mut cells = Vec::with_capacity(trials * 11);
    for trial in 0..trials {
        let (a, b) = partition_types(types, trial, seed)?;
        let union = all.clone();
        let mk = |row: usize, description: &str, train: TrainSpec, adapt: Option<Vec<String>>, test: TestSpec| {
            ExperimentCell {
                row,
                description: description.to_string(),
                trial,
                train,
                adapt,
                test,
            }
        };
        cells.push(mk(1, "word-only baseline", TrainSpec::None, None, TestSpec::WordOnly));
        cells.push(mk(2, "proxy training (cheating)", TrainSpec::Proxy, None, TestSpec::Proxy));
        cells.push(mk(
            3,
            "context A always available",
            TrainSpec::Types(a.clone()),
            None,
            TestSpec::Types(a.clone()),
        ));
        cells.push(mk(
            4,
            "no training context, adapt to B",
            TrainSpec::Proxy,
            Some(b.clone()),
            TestSpec::Types(b.clone()),
        ));
        cells.push(mk(
            5,
            "A zero-shot to B",
            TrainSpec::Types(a.clone()),
            None,
            TestSpec::Types(b.clone()),
        ));
        cells.push(mk(
            6,
            "context A replaced by B",
            TrainSpec::Types(a.clone()),
            Some(b.clone()),
            TestSpec::Types(b.clone()),
        ));
        cells.push(mk(
            7,
            "context B always available",
            TrainSpec::Types(b.clone()),
            None,
            TestSpec::Types(b.clone()),
        ));
        cells.push(mk(
            8,
            "no training context, adapt to A+B",
            TrainSpec::Proxy,
            Some(union.clone()),
            TestSpec::Types(union.clone()),
        ));
        cells.push(mk(
            9,
            "A zero-shot to A+B",
            TrainSpec::Types(a.clone()),
            None,
            TestSpec::Types(union.clone()),
        ));
        cells.push(mk(
            10,
            "context B added after training",
            TrainSpec::Types(a.clone()),
            Some(union.clone()),
            TestSpec::Types(union.clone()),
        ));
        cells.push(mk(
            11,
            "context A+B always available",
            TrainSpec::Types(union.clone()),
            None,
            TestSpec::Types(union),
        ));
    }
    Ok(cells)
}
