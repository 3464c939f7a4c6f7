//! Perplexity evaluation and the analysis suite: ablations, per-signal
//! strength, proxy noise sweeps, cache-effect and cluster analyses.
//!
//! Large-scale reference values recorded for documentation (see the README
//! results table) are orderings only; every assertion in this workspace
//! runs against synthetic-corpus oracles.

pub mod ablation;
pub mod cache;
pub mod cluster;
pub mod plot;
pub mod ppl;
pub mod strength;
pub mod sweep;

pub use ablation::{context_only_ppl, run_ablation_suite, AblationRow, AblationVariants};
pub use cache::{cache_analysis, CacheAnalysis};
pub use cluster::{aligned_accuracy, cluster_embeddings, kmeans, ClusterReport};
pub use ppl::{
    context_for_mode, evaluate_ppl, evaluate_ppl_with_embeddings, ContextMode, PplReport,
};
pub use strength::{per_context_strength, spearman, StrengthReport, StrengthRow};
pub use sweep::{noise_sweep, SweepInputs, SweepPoint, SweepReport};

use crate::error::{CueError, Result};

/// Writes a serializable report as pretty JSON.
pub fn write_json<T: serde::Serialize>(value: &T, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CueError::json("report", e))?;
    std::fs::write(path, json).map_err(|e| CueError::io(path.display().to_string(), e))
}

/// Writes rows of (name, value) pairs as a two-column CSV.
pub fn write_csv_rows(
    header: (&str, &str),
    rows: &[(String, f64)],
    path: &std::path::Path,
) -> Result<()> {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (name, value) in rows {
        out.push_str(&format!("{name},{value}\n"));
    }
    std::fs::write(path, out).map_err(|e| CueError::io(path.display().to_string(), e))
}
