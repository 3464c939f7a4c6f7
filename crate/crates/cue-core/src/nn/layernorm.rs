use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::param::{Grads, Init, ParamGroup, ParamId, ParamStore};

const EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug)]
pub struct LayerNormCache {
    /// Normalized rows (x - mean) / std.
    pub xhat: Array2<f32>,
    /// Per-row 1/std.
    pub inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = ps.alloc(&format!("{name}.gamma"), group, &[dim], Init::Ones, rng);
        let beta = ps.alloc(&format!("{name}.beta"), group, &[dim], Init::Zeros, rng);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let n = x.ncols() as f32;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let inv_std: Array1<f32> = xhat
            .rows()
            .into_iter()
            .map(|r| {
                let var = r.iter().map(|&v| v * v).sum::<f32>() / n;
                1.0 / (var + EPS).sqrt()
            })
            .collect();
        for (mut row, &is) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * is);
        }
        let gamma = ps.p1(self.gamma);
        let beta = ps.p1(self.beta);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gamma, |v, &g| *v *= g);
            row += &beta;
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LayerNormCache,
        dy: &Array2<f32>,
        grads: &mut Grads,
    ) -> Array2<f32> {
        let n = dy.ncols() as f32;
        if grads.is_active(self.gamma) {
            grads.add1(ps, self.gamma, (dy * &cache.xhat).sum_axis(Axis(0)));
            grads.add1(ps, self.beta, dy.sum_axis(Axis(0)));
        }
        let gamma = ps.p1(self.gamma);
        // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut dx = Array2::<f32>::zeros(dy.raw_dim());
        for (i, (dy_row, xhat_row)) in dy.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            let dxhat: Vec<f32> = dy_row
                .iter()
                .zip(gamma.iter())
                .map(|(&d, &g)| d * g)
                .collect();
            let mean_dxhat: f32 = dxhat.iter().sum::<f32>() / n;
            let mean_dxhat_xhat: f32 = dxhat
                .iter()
                .zip(xhat_row.iter())
                .map(|(&d, &h)| d * h)
                .sum::<f32>()
                / n;
            let is = cache.inv_std[i];
            for (j, slot) in dx.row_mut(i).iter_mut().enumerate() {
                *slot = is * (dxhat[j] - mean_dxhat - xhat_row[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}
