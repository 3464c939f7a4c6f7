use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::param::{Grads, Init, ParamGroup, ParamId, ParamStore};

/// Lookup table `(rows, dim)`; backward scatter-adds into the table rows.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        rows: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = ps.alloc(name, group, &[rows, dim], Init::Normal(0.02), rng);
        Embedding { table, rows, dim }
    }

    pub fn forward(&self, ps: &ParamStore, ids: &[u32]) -> Array2<f32> {
        let table = ps.p2(self.table);
        let mut out = Array2::<f32>::zeros((ids.len(), self.dim));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids.iter()) {
            row.assign(&table.row(id as usize));
        }
        out
    }

    pub fn backward(&self, ps: &ParamStore, ids: &[u32], dy: &Array2<f32>, grads: &mut Grads) {
        grads.add_rows(ps, self.table, ids, dy);
    }
}
