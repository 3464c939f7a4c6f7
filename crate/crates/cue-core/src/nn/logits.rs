//! Vocabulary projection and negative log-likelihood.
//!
//! Reserved ids that must never be emitted (PAD, BOS, CLS) are masked to
//! negative infinity before normalization, so their probability is exactly
//! zero and they receive no gradient.

use ndarray::Array2;

use super::linear::Linear;
use super::param::{Grads, ParamStore};

/// Log-softmax over rows, masking `forbidden` columns.
pub fn log_softmax_masked(logits: &Array2<f32>, forbidden: &[u32]) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        for &f in forbidden {
            row[f as usize] = f32::NEG_INFINITY;
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &x in row.iter() {
            sum += (x - max).exp() as f64;
        }
        let lse = max + sum.ln() as f32;
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Sum of negative log-likelihoods of `targets` under masked-softmax rows
/// of `logits`, plus the number of scored positions. Positions where
/// `score[i]` is false are skipped.
pub fn nll_sum(logits: &Array2<f32>, targets: &[u32], score: &[bool], forbidden: &[u32]) -> (f64, usize) {
    debug_assert_eq!(logits.nrows(), targets.len());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ((row, &t), &keep) in logits.rows().into_iter().zip(targets).zip(score) {
        if !keep {
            continue;
        }
        let mut max = f32::NEG_INFINITY;
        for (j, &x) in row.iter().enumerate() {
            if forbidden.contains(&(j as u32)) {
                continue;
            }
            if x > max {
                max = x;
            }
        }
        let mut lse = 0.0f64;
        for (j, &x) in row.iter().enumerate() {
            if forbidden.contains(&(j as u32)) {
                continue;
            }
            lse += (x - max).exp() as f64;
        }
        let lse = max as f64 + lse.ln();
        total += lse - row[t as usize] as f64;
        count += 1;
    }
    (total, count)
}

/// NLL sum plus gradient of the *sum* with respect to the logits.
pub fn nll_sum_backward(
    logits: &Array2<f32>,
    targets: &[u32],
    score: &[bool],
    forbidden: &[u32],
) -> (f64, usize, Array2<f32>) {
    let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        if !score[i] {
            continue;
        }
        let mut max = f32::NEG_INFINITY;
        for (j, &x) in row.iter().enumerate() {
            if forbidden.contains(&(j as u32)) {
                continue;
            }
            if x > max {
                max = x;
            }
        }
        let mut lse = 0.0f64;
        for (j, &x) in row.iter().enumerate() {
            if forbidden.contains(&(j as u32)) {
                continue;
            }
            lse += (x - max).exp() as f64;
        }
        total += max as f64 + lse.ln() - row[t as usize] as f64;
        count += 1;
        let denom = lse as f32;
        let mut drow = dlogits.row_mut(i);
        for (j, &x) in row.iter().enumerate() {
            if forbidden.contains(&(j as u32)) {
                continue;
            }
            drow[j] = (x - max).exp() / denom;
        }
        drow[t as usize] -= 1.0;
    }
    (total, count, dlogits)
}

/// The LM head: states -> logits via a `Linear`, with loss helpers.
pub struct LmHead<'a> {
    pub proj: &'a Linear,
    pub forbidden: &'a [u32],
}

impl LmHead<'_> {
    pub fn logits(&self, ps: &ParamStore, states: &Array2<f32>) -> Array2<f32> {
        self.proj.forward(ps, states)
    }

    pub fn loss_sum(
        &self,
        ps: &ParamStore,
        states: &Array2<f32>,
        targets: &[u32],
        score: &[bool],
    ) -> (f64, usize) {
        let logits = self.logits(ps, states);
        nll_sum(&logits, targets, score, self.forbidden)
    }

    /// Returns (nll_sum, scored_count, dstates) and accumulates head grads.
    pub fn loss_backward(
        &self,
        ps: &ParamStore,
        states: &Array2<f32>,
        targets: &[u32],
        score: &[bool],
        grads: &mut Grads,
    ) -> (f64, usize, Array2<f32>) {
        let logits = self.logits(ps, states);
        let (total, count, dlogits) = nll_sum_backward(&logits, targets, score, self.forbidden);
        let dstates = self.proj.backward(ps, states, &dlogits, grads);
        (total, count, dstates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn masked_rows_normalize_and_zero_forbidden() {
        let logits = array![[0.5f32, -1.0, 2.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        let lp = log_softmax_masked(&logits, &[1]);
        for row in lp.rows() {
            let sum: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            assert_eq!(row[1], f32::NEG_INFINITY);
        }
    }

    #[test]
    fn nll_matches_log_softmax() {
        let logits = array![[0.2f32, 1.4, -0.7], [0.0, 0.0, 3.0]];
        let lp = log_softmax_masked(&logits, &[]);
        let (total, count) = nll_sum(&logits, &[1, 2], &[true, true], &[]);
        let expect = -(lp[[0, 1]] as f64) - (lp[[1, 2]] as f64);
        assert_eq!(count, 2);
        assert!((total - expect).abs() < 1e-6);
    }
}
