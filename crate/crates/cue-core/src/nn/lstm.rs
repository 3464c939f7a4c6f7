use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::param::{Grads, Init, ParamGroup, ParamId, ParamStore};

/// Single LSTM layer with gate order [input, forget, cell, output].
#[derive(Debug, Clone)]
pub struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

pub struct LstmLayerCache {
    /// Per step: (i, f, g, o, c, tanh_c).
    steps: Vec<[Array1<f32>; 6]>,
    h_prev: Vec<Array1<f32>>,
    c_prev: Vec<Array1<f32>>,
    input: Array2<f32>,
}

impl LstmLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 1.0 / (hidden as f32).sqrt();
        let w_ih = ps.alloc(
            &format!("{name}.w_ih"),
            group,
            &[in_dim, 4 * hidden],
            Init::Normal(scale),
            rng,
        );
        let w_hh = ps.alloc(
            &format!("{name}.w_hh"),
            group,
            &[hidden, 4 * hidden],
            Init::Normal(scale),
            rng,
        );
        let bias = ps.alloc(&format!("{name}.b"), group, &[4 * hidden], Init::Zeros, rng);
        LstmLayer {
            w_ih,
            w_hh,
            bias,
            in_dim,
            hidden,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f32>) -> (Array2<f32>, LstmLayerCache) {
        let steps_n = x.nrows();
        let h = self.hidden;
        let w_ih = ps.p2(self.w_ih);
        let w_hh = ps.p2(self.w_hh);
        let bias = ps.p1(self.bias);

        let mut out = Array2::<f32>::zeros((steps_n, h));
        let mut cache = LstmLayerCache {
            steps: Vec::with_capacity(steps_n),
            h_prev: Vec::with_capacity(steps_n),
            c_prev: Vec::with_capacity(steps_n),
            input: x.clone(),
        };
        let mut h_t = Array1::<f32>::zeros(h);
        let mut c_t = Array1::<f32>::zeros(h);
        for t in 0..steps_n {
            cache.h_prev.push(h_t.clone());
            cache.c_prev.push(c_t.clone());
            let mut z = x.row(t).dot(&w_ih) + h_t.dot(&w_hh);
            z += &bias;
            let gi = z.slice(s![0..h]).mapv(sigmoid);
            let gf = z.slice(s![h..2 * h]).mapv(sigmoid);
            let gg = z.slice(s![2 * h..3 * h]).mapv(f32::tanh);
            let go = z.slice(s![3 * h..4 * h]).mapv(sigmoid);
            c_t = &gf * &c_t + &gi * &gg;
            let tanh_c = c_t.mapv(f32::tanh);
            h_t = &go * &tanh_c;
            out.row_mut(t).assign(&h_t);
            cache
                .steps
                .push([gi, gf, gg, go, c_t.clone(), tanh_c]);
        }
        (out, cache)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LstmLayerCache,
        dout: &Array2<f32>,
        grads: &mut Grads,
    ) -> Array2<f32> {
        let steps_n = dout.nrows();
        let h = self.hidden;
        let w_ih = ps.p2(self.w_ih);
        let w_hh = ps.p2(self.w_hh);

        let mut dw_ih = Array2::<f32>::zeros((self.in_dim, 4 * h));
        let mut dw_hh = Array2::<f32>::zeros((h, 4 * h));
        let mut db = Array1::<f32>::zeros(4 * h);
        let mut dx = Array2::<f32>::zeros((steps_n, self.in_dim));

        let mut dh_next = Array1::<f32>::zeros(h);
        let mut dc_next = Array1::<f32>::zeros(h);
        for t in (0..steps_n).rev() {
            let [gi, gf, gg, go, _c, tanh_c] = &cache.steps[t];
            let dh = &dout.row(t).to_owned() + &dh_next;
            let do_ = &dh * tanh_c;
            let mut dc = &dc_next + &(&dh * go * &tanh_c.mapv(|v| 1.0 - v * v));
            let di = &dc * gg;
            let dg = &dc * gi;
            let df = &dc * &cache.c_prev[t];
            dc *= gf;
            dc_next = dc;

            let mut dz = Array1::<f32>::zeros(4 * h);
            dz.slice_mut(s![0..h]).assign(&(&di * gi * &gi.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![h..2 * h])
                .assign(&(&df * gf * &gf.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![2 * h..3 * h])
                .assign(&(&dg * &gg.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![3 * h..4 * h])
                .assign(&(&do_ * go * &go.mapv(|v| 1.0 - v)));

            let dz_row = dz.view().insert_axis(ndarray::Axis(0));
            let x_col = cache.input.row(t).insert_axis(ndarray::Axis(1));
            dw_ih += &x_col.dot(&dz_row);
            let h_col = cache.h_prev[t].view().insert_axis(ndarray::Axis(1));
            dw_hh += &h_col.dot(&dz_row);
            db += &dz;
            dx.row_mut(t).assign(&dz.dot(&w_ih.t()));
            dh_next = dz.dot(&w_hh.t());
        }
        if grads.is_active(self.w_ih) {
            grads.add2(ps, self.w_ih, dw_ih);
            grads.add2(ps, self.w_hh, dw_hh);
            grads.add1(ps, self.bias, db);
        }
        dx
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
