//! Document-level corpus partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::document::Document;
use crate::error::{CueError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    WordLm,
    ContextTrain,
    ContextAdapt,
    Validation,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 5] = [
        SplitRole::WordLm,
        SplitRole::ContextTrain,
        SplitRole::ContextAdapt,
        SplitRole::Validation,
        SplitRole::Test,
    ];

    pub fn file_stem(&self) -> &'static str {
        match self {
            SplitRole::WordLm => "word_lm",
            SplitRole::ContextTrain => "context_train",
            SplitRole::ContextAdapt => "context_adapt",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        }
    }
}

/// Role sizes as fractions of the corpus or absolute document counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSpec {
    Fractions(BTreeMap<SplitRole, f64>),
    Counts(BTreeMap<SplitRole, usize>),
}

impl SplitSpec {
    pub fn default_fractions() -> Self {
        let mut m = BTreeMap::new();
        m.insert(SplitRole::WordLm, 0.55);
        m.insert(SplitRole::ContextTrain, 0.18);
        m.insert(SplitRole::ContextAdapt, 0.12);
        m.insert(SplitRole::Validation, 0.05);
        m.insert(SplitRole::Test, 0.10);
        SplitSpec::Fractions(m)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SplitSpec::Fractions(m) => {
                let sum: f64 = m.values().sum();
                if m.values().any(|&f| f < 0.0) || sum > 1.0 + 1e-9 {
                    return Err(CueError::InvalidConfig(format!(
                        "split fractions must be non-negative and sum to <= 1 (sum = {sum})"
                    )));
                }
                Ok(())
            }
            SplitSpec::Counts(_) => Ok(()),
        }
    }

    /// Document counts per role. With fractions summing to one, leftover
    /// documents from flooring are distributed by largest remainder so the
    /// roles cover the corpus exactly.
    fn sizes(&self, n: usize) -> Result<BTreeMap<SplitRole, usize>> {
        match self {
            SplitSpec::Counts(m) => {
                let total: usize = m.values().sum();
                if total > n {
                    return Err(CueError::InsufficientDocuments {
                        requested: total,
                        available: n,
                    });
                }
                Ok(m.clone())
            }
            SplitSpec::Fractions(m) => {
                let sum: f64 = m.values().sum();
                let mut sizes: BTreeMap<SplitRole, usize> = BTreeMap::new();
                let mut remainders: Vec<(SplitRole, f64)> = Vec::new();
                let mut used = 0usize;
                for (&role, &frac) in m {
                    let exact = frac * n as f64;
                    let size = exact.floor() as usize;
                    sizes.insert(role, size);
                    used += size;
                    remainders.push((role, exact - size as f64));
                }
                if (sum - 1.0).abs() < 1e-9 {
                    let mut leftover = n - used;
                    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                    for (role, _) in remainders {
                        if leftover == 0 {
                            break;
                        }
                        *sizes.get_mut(&role).unwrap() += 1;
                        leftover -= 1;
                    }
                }
                Ok(sizes)
            }
        }
    }
}

/// Shuffles documents by seed, then partitions them by role in a fixed role
/// order. Deterministic given the seed; roles are disjoint at the document
/// level.
pub fn split_corpus(
    docs: Vec<Document>,
    spec: &SplitSpec,
    seed: u64,
) -> Result<BTreeMap<SplitRole, Vec<Document>>> {
    spec.validate()?;
    let sizes = spec.sizes(docs.len())?;
    let mut rng = rng::derive(seed, "corpus-split");
    let mut docs = docs;
    docs.shuffle(&mut rng);

    let mut out: BTreeMap<SplitRole, Vec<Document>> = BTreeMap::new();
    let mut rest = docs;
    for role in SplitRole::ALL {
        let take = sizes.get(&role).copied().unwrap_or(0);
        let tail = rest.split_off(take.min(rest.len()));
        out.insert(role, rest);
        rest = tail;
    }
    Ok(out)
}
