use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::param::{Grads, Init, ParamGroup, ParamId, ParamStore};

/// Affine map `y = x W + b` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // GPT-style small init keeps untrained logits near zero.
        let w = ps.alloc(
            &format!("{name}.w"),
            group,
            &[in_dim, out_dim],
            Init::Normal(0.02),
            rng,
        );
        let b = bias.then(|| ps.alloc(&format!("{name}.b"), group, &[out_dim], Init::Zeros, rng));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(&ps.p2(self.w));
        if let Some(b) = self.b {
            y += &ps.p1(b);
        }
        y
    }

    /// Returns dx; accumulates dW (and db) from the saved input.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Array2<f32>,
        dy: &Array2<f32>,
        grads: &mut Grads,
    ) -> Array2<f32> {
        if grads.is_active(self.w) {
            grads.add2(ps, self.w, x.t().dot(dy));
            if let Some(b) = self.b {
                grads.add1(ps, b, dy.sum_axis(ndarray::Axis(0)));
            }
        }
        dy.dot(&ps.p2(self.w).t())
    }

    /// dx only, for paths where this layer's parameters are frozen.
    pub fn backward_input(&self, ps: &ParamStore, dy: &Array2<f32>) -> Array2<f32> {
        dy.dot(&ps.p2(self.w).t())
    }
}
