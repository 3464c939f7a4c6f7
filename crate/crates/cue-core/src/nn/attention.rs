use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::linear::Linear;
use super::param::{Grads, ParamGroup, ParamStore};

/// Multi-head scaled dot-product attention.
///
/// Queries come from `xq`, keys/values from `xkv` (the same array for
/// self-attention, the memory for cross-attention). The causal mask zeroes
/// attention to positions after the query index and requires square score
/// matrices.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug)]
pub struct AttentionCache {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// Post-softmax weights, one (Lq, Lk) matrix per head.
    pub attn: Vec<Array2<f32>>,
    /// Concatenated per-head context vectors, pre output projection.
    pub ctx: Array2<f32>,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim % heads == 0, "model dim must divide head count");
        MultiHeadAttention {
            wq: Linear::new(ps, &format!("{name}.wq"), group, dim, dim, true, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), group, dim, dim, true, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), group, dim, dim, true, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), group, dim, dim, true, rng),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &Array2<f32>,
        xkv: &Array2<f32>,
        causal: bool,
    ) -> (Array2<f32>, AttentionCache) {
        let lq = xq.nrows();
        let lk = xkv.nrows();
        if causal {
            debug_assert_eq!(lq, lk, "causal mask needs square scores");
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let q = self.wq.forward(ps, xq);
        let k = self.wk.forward(ps, xkv);
        let v = self.wv.forward(ps, xkv);

        let mut ctx = Array2::<f32>::zeros((lq, self.dim));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            if causal {
                for i in 0..lq {
                    for j in (i + 1)..lk {
                        scores[[i, j]] = f32::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            let ch = scores.dot(&vh);
            ctx.slice_mut(cols).assign(&ch);
            attn.push(scores);
        }
        let out = self.wo.forward(ps, &ctx);
        (out, AttentionCache { q, k, v, attn, ctx })
    }

    /// Returns (dxq, dxkv). For self-attention the caller adds them.
    pub fn backward(
        &self,
        ps: &ParamStore,
        xq: &Array2<f32>,
        xkv: &Array2<f32>,
        cache: &AttentionCache,
        dout: &Array2<f32>,
        grads: &mut Grads,
    ) -> (Array2<f32>, Array2<f32>) {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let dctx = self.wo.backward(ps, &cache.ctx, dout, grads);

        let mut dq = Array2::<f32>::zeros(cache.q.raw_dim());
        let mut dk = Array2::<f32>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<f32>::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.attn[h];
            let vh = cache.v.slice(cols);
            let dch = dctx.slice(cols);

            let da = dch.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&dch));

            // softmax jacobian: ds = a * (da - rowsum(da * a))
            let prod = &da * a;
            let rowsum = prod.sum_axis(Axis(1));
            let mut ds = da;
            for ((mut row, arow), &rs) in
                ds.rows_mut().into_iter().zip(a.rows()).zip(rowsum.iter())
            {
                for (x, &aij) in row.iter_mut().zip(arow.iter()) {
                    *x = aij * (*x - rs);
                }
            }
            ds.mapv_inplace(|x| x * scale);

            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        let dxq = self.wq.backward(ps, xq, &dq, grads);
        let mut dxkv = self.wk.backward(ps, xkv, &dk, grads);
        dxkv += &self.wv.backward(ps, xkv, &dv, grads);
        (dxq, dxkv)
    }
}

pub fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
