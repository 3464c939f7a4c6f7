//! K-means clustering of exported cue vectors with TF-IDF cluster labels.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Document, Vocabulary};
use crate::error::{CueError, Result};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub inertia: f64,
    /// Top TF-IDF terms per cluster from context strings.
    pub top_context_terms: Vec<Vec<(String, f64)>>,
    /// Top TF-IDF terms per cluster from article text.
    pub top_text_terms: Vec<Vec<(String, f64)>>,
}

/// Lloyd's algorithm with seeded k-means++ initialization and `restarts`
/// restarts keeping the lowest inertia.
pub fn kmeans(
    vectors: &[Vec<f32>],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<(Vec<usize>, f64)> {
    if k == 0 || k > vectors.len() {
        return Err(CueError::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..restarts.max(1) {
        let mut r = rng::derive_indexed(seed, "kmeans", restart as u64);
        // k-means++ seeding
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
        let first = r.random_range(0..vectors.len());
        centroids.push(vectors[first].iter().map(|&x| x as f64).collect());
        while centroids.len() < k {
            let d2: Vec<f64> = vectors
                .iter()
                .map(|v| {
                    centroids
                        .iter()
                        .map(|c| sq_dist(v, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            let next = if total <= 0.0 {
                r.random_range(0..vectors.len())
            } else {
                let mut target = r.random::<f64>() * total;
                let mut chosen = vectors.len() - 1;
                for (i, &d) in d2.iter().enumerate() {
                    target -= d;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            centroids.push(vectors[next].iter().map(|&x| x as f64).collect());
        }

        let mut assignments = vec![0usize; vectors.len()];
        for _ in 0..60 {
            let mut changed = false;
            for (i, v) in vectors.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = sq_dist(v, centroid);
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assignments[i] != best_c {
                    assignments[i] = best_c;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for (v, &a) in vectors.iter().zip(&assignments) {
                counts[a] += 1;
                for (s, &x) in sums[a].iter_mut().zip(v.iter()) {
                    *s += x as f64;
                }
            }
            for (c, (sum, &count)) in sums.into_iter().zip(&counts).enumerate() {
                if count > 0 {
                    centroids[c] = sum.into_iter().map(|s| s / count as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = vectors
            .iter()
            .zip(&assignments)
            .map(|(v, &a)| sq_dist(v, &centroids[a]))
            .sum();
        if best.as_ref().map(|(_, b)| inertia < *b).unwrap_or(true) {
            best = Some((assignments, inertia));
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(v: &[f32], c: &[f64]) -> f64 {
    v.iter()
        .zip(c.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// TF within cluster, IDF over the clusters' aggregate documents, with +1
/// smoothing; returns the top `n` terms per cluster.
fn tfidf_top(cluster_texts: &[Vec<String>], n: usize) -> Vec<Vec<(String, f64)>> {
    let k = cluster_texts.len();
    let counts: Vec<BTreeMap<String, usize>> = cluster_texts
        .iter()
        .map(|texts| {
            let mut m = BTreeMap::new();
            for text in texts {
                for tok in tokenize(text) {
                    *m.entry(tok).or_insert(0) += 1;
                }
            }
            m
        })
        .collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &counts {
        for term in m.keys() {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    counts
        .iter()
        .map(|m| {
            let total: usize = m.values().sum();
            let mut scored: Vec<(String, f64)> = m
                .iter()
                .map(|(term, &c)| {
                    let tf = c as f64 / total.max(1) as f64;
                    let idf = ((1.0 + k as f64) / (1.0 + df[term.as_str()] as f64)).ln() + 1.0;
                    (term.clone(), tf * idf)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            scored.truncate(n);
            scored
        })
        .collect()
}

/// Clusters exported cue vectors and labels each cluster with its top-5
/// TF-IDF words from context strings and, separately, from article text.
pub fn cluster_embeddings(
    vectors: &[(String, Vec<f32>)],
    docs: &[Document],
    vocab: &Vocabulary,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterReport> {
    if vectors.is_empty() {
        return Err(CueError::EmptyInput("embedding store".into()));
    }
    let raw: Vec<Vec<f32>> = vectors.iter().map(|(_, v)| v.clone()).collect();
    let (assignments, inertia) = kmeans(&raw, k, restarts, seed)?;

    let by_id: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut context_texts: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut article_texts: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut report_assignments = BTreeMap::new();
    for ((doc_id, _), &cluster) in vectors.iter().zip(&assignments) {
        report_assignments.insert(doc_id.clone(), cluster);
        if let Some(doc) = by_id.get(doc_id.as_str()) {
            for value in doc.context.values() {
                context_texts[cluster].push(value.clone());
            }
            for sentence in &doc.sentences {
                article_texts[cluster].push(vocab.decode(&sentence.ids));
            }
        }
    }
    Ok(ClusterReport {
        k,
        assignments: report_assignments,
        inertia,
        top_context_terms: tfidf_top(&context_texts, 5),
        top_text_terms: tfidf_top(&article_texts, 5),
    })
}

/// Best-permutation accuracy between cluster assignments and ground-truth
/// labels (exact search; intended for small k).
pub fn aligned_accuracy(assignments: &[usize], labels: &[usize], k: usize) -> f64 {
    assert_eq!(assignments.len(), labels.len());
    assert!(k <= 10, "exact alignment is exponential in k");
    let mut confusion = vec![vec![0usize; k]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        confusion[a][l] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let score: usize = (0..k).map(|c| confusion[c][p[c]]).sum();
        if score > best {
            best = score;
        }
    });
    best as f64 / assignments.len() as f64
}

fn permute(perm: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == perm.len() {
        visit(perm);
        return;
    }
    for i in at..perm.len() {
        perm.swap(at, i);
        permute(perm, at + 1, visit);
        perm.swap(at, i);
    }
}
