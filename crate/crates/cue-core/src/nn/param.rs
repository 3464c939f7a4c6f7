//! Parameter storage with named groups.
//!
//! Every trainable array lives in a [`ParamStore`] slot tagged with the
//! [`ParamGroup`] it belongs to. Freeze schedules, optimizer updates,
//! checkpoint diffs and parameter counting all operate on these tags, which
//! is what makes the per-phase freeze contract bit-exact: a frozen group is
//! simply never written.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};

/// Parameter groups recognized by freeze schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    SentenceEncoder,
    TextEncoder,
    ContextFfn,
    ContextTransformer,
    Decoder,
    ProxyProjector,
    Autoencoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::SentenceEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::ContextFfn,
        ParamGroup::ContextTransformer,
        ParamGroup::Decoder,
        ParamGroup::ProxyProjector,
        ParamGroup::Autoencoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::SentenceEncoder => "sentence-encoder",
            ParamGroup::TextEncoder => "text-encoder",
            ParamGroup::ContextFfn => "context-ffn",
            ParamGroup::ContextTransformer => "context-transformer",
            ParamGroup::Decoder => "decoder",
            ParamGroup::ProxyProjector => "proxy-projector",
            ParamGroup::Autoencoder => "autoencoder",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| CueError::InvalidConfig(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

/// Initialization recipe for a freshly allocated parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

/// Owns the values of every parameter of one model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    metas: Vec<ParamMeta>,
    vals: Vec<ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            metas: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn alloc(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        debug_assert!(
            !self.metas.iter().any(|m| m.name == name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Normal(std) => (0..n).map(|_| sample_normal(rng) * std).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch");
        self.metas.push(ParamMeta {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
        });
        self.vals.push(arr);
        ParamId(self.metas.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.metas.len()).map(ParamId)
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.metas[id.0]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.metas
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.vals[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.vals[id.0]
    }

    pub fn p2(&self, id: ParamId) -> ArrayView2<'_, f32> {
        self.vals[id.0]
            .view()
            .into_dimensionality()
            .expect("parameter is not 2-d")
    }

    pub fn p1(&self, id: ParamId) -> ArrayView1<'_, f32> {
        self.vals[id.0]
            .view()
            .into_dimensionality()
            .expect("parameter is not 1-d")
    }

    pub fn set2(&mut self, id: ParamId, value: Array2<f32>) {
        assert_eq!(self.metas[id.0].shape, value.shape().to_vec());
        self.vals[id.0] = value.into_dyn();
    }

    pub fn set1(&mut self, id: ParamId, value: Array1<f32>) {
        assert_eq!(self.metas[id.0].shape, value.shape().to_vec());
        self.vals[id.0] = value.into_dyn();
    }

    /// Total scalar count per group.
    pub fn count_by_group(&self) -> std::collections::BTreeMap<ParamGroup, usize> {
        let mut out = std::collections::BTreeMap::new();
        for (m, v) in self.metas.iter().zip(&self.vals) {
            *out.entry(m.group).or_insert(0) += v.len();
        }
        out
    }

    pub fn total_len(&self) -> usize {
        self.vals.iter().map(|v| v.len()).sum()
    }

    /// Flat little-endian byte image of every value, in slot order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len() * 4);
        for v in &self.vals {
            for &x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.total_len() * 4 {
            return Err(CueError::ShapeMismatch(format!(
                "checkpoint payload is {} bytes, store needs {}",
                bytes.len(),
                self.total_len() * 4
            )));
        }
        let mut off = 0;
        for v in &mut self.vals {
            for x in v.iter_mut() {
                *x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                off += 4;
            }
        }
        Ok(())
    }

    /// Names of parameters whose bytes differ between two stores with the
    /// same layout.
    pub fn diff_names(&self, other: &ParamStore) -> Vec<String> {
        assert_eq!(self.len(), other.len(), "store layouts differ");
        let mut out = Vec::new();
        for i in 0..self.len() {
            let a = &self.vals[i];
            let b = &other.vals[i];
            if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                out.push(self.metas[i].name.clone());
            }
        }
        out
    }

    /// Groups containing at least one changed parameter.
    pub fn diff_groups(&self, other: &ParamStore) -> std::collections::BTreeSet<ParamGroup> {
        let mut out = std::collections::BTreeSet::new();
        for i in 0..self.len() {
            let a = &self.vals[i];
            let b = &other.vals[i];
            if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                out.insert(self.metas[i].group);
            }
        }
        out
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Box-Muller standard normal; kept local so corpus and model sampling can
/// share one deterministic primitive.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-12 {
            return ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
        }
    }
}

/// Gradient buffers mirroring one [`ParamStore`].
///
/// Accumulation into a group outside the active set is a no-op, so frozen
/// groups end a batch with identically zero gradients — the "detached graph"
/// contract.
#[derive(Debug)]
pub struct Grads {
    bufs: Vec<Option<ArrayD<f32>>>,
    active: Vec<bool>,
}

impl Grads {
    /// Gradient buffers for `store` restricted to `trainable` groups.
    pub fn new(store: &ParamStore, trainable: &[ParamGroup]) -> Self {
        let active: Vec<bool> = store
            .metas()
            .iter()
            .map(|m| trainable.contains(&m.group))
            .collect();
        Grads {
            bufs: vec![None; store.len()],
            active,
        }
    }

    pub fn is_active(&self, id: ParamId) -> bool {
        self.active[id.0]
    }

    /// Accumulates `delta` into the gradient of `id` if its group is active.
    pub fn add(&mut self, store: &ParamStore, id: ParamId, delta: &ArrayD<f32>) {
        if !self.active[id.0] {
            return;
        }
        match &mut self.bufs[id.0] {
            Some(buf) => *buf += delta,
            slot => {
                // normalize to standard layout: matmul outputs can be
                // Fortran-ordered for rank-1 shapes
                *slot = Some(delta.as_standard_layout().to_owned());
            }
        }
        debug_assert_eq!(
            self.bufs[id.0].as_ref().unwrap().shape(),
            store.value(id).shape()
        );
    }

    pub fn add2(&mut self, store: &ParamStore, id: ParamId, delta: Array2<f32>) {
        self.add(store, id, &delta.into_dyn());
    }

    pub fn add1(&mut self, store: &ParamStore, id: ParamId, delta: Array1<f32>) {
        self.add(store, id, &delta.into_dyn());
    }

    /// Scatter-adds `rows` of `dy` into the table gradient at `ids`,
    /// allocating the buffer on first use.
    pub fn add_rows(&mut self, store: &ParamStore, id: ParamId, ids: &[u32], dy: &Array2<f32>) {
        if !self.active[id.0] {
            return;
        }
        let buf = self.bufs[id.0]
            .get_or_insert_with(|| ArrayD::zeros(store.value(id).raw_dim()));
        let mut view = buf.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (row, &tok) in dy.rows().into_iter().zip(ids.iter()) {
            let mut target = view.row_mut(tok as usize);
            target += &row;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.bufs[id.0].as_ref()
    }

    /// Merges another gradient buffer (same layout) into this one.
    pub fn merge(&mut self, other: Grads) {
        for (mine, theirs) in self.bufs.iter_mut().zip(other.bufs) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += &t,
                    slot => *slot = Some(t),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for buf in self.bufs.iter_mut().flatten() {
            buf.mapv_inplace(|x| x * factor);
        }
    }

    pub fn clamp_values(&mut self, limit: f32) {
        for buf in self.bufs.iter_mut().flatten() {
            buf.mapv_inplace(|x| x.clamp(-limit, limit));
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .map(|b| b.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
            .sum()
    }

    pub fn iter_present(&self) -> impl Iterator<Item = (ParamId, &ArrayD<f32>)> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (ParamId(i), b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    #[test]
    fn alloc_and_views() {
        let mut rng = derive(0, "t");
        let mut ps = ParamStore::new();
        let w = ps.alloc("w", ParamGroup::Decoder, &[3, 4], Init::Normal(0.1), &mut rng);
        let b = ps.alloc("b", ParamGroup::Decoder, &[4], Init::Zeros, &mut rng);
        assert_eq!(ps.p2(w).shape(), &[3, 4]);
        assert_eq!(ps.p1(b).len(), 4);
        assert!(ps.p1(b).iter().all(|&x| x == 0.0));
        let counts = ps.count_by_group();
        assert_eq!(counts[&ParamGroup::Decoder], 16);
    }

    #[test]
    fn grads_respect_active_mask() {
        let mut rng = derive(0, "t");
        let mut ps = ParamStore::new();
        let w = ps.alloc("w", ParamGroup::Decoder, &[2, 2], Init::Ones, &mut rng);
        let f = ps.alloc(
            "f",
            ParamGroup::SentenceEncoder,
            &[2, 2],
            Init::Ones,
            &mut rng,
        );
        let mut g = Grads::new(&ps, &[ParamGroup::Decoder]);
        g.add2(&ps, w, Array2::ones((2, 2)));
        g.add2(&ps, f, Array2::ones((2, 2)));
        assert!(g.get(w).is_some());
        assert!(g.get(f).is_none(), "frozen group must accumulate nothing");
    }

    #[test]
    fn byte_roundtrip_and_diff() {
        let mut rng = derive(1, "t");
        let mut ps = ParamStore::new();
        let w = ps.alloc("w", ParamGroup::Decoder, &[4, 4], Init::Normal(1.0), &mut rng);
        let snapshot = ps.clone();
        let bytes = ps.to_bytes();
        ps.value_mut(w)[[0, 0]] += 1.0;
        assert_eq!(ps.diff_names(&snapshot), vec!["w".to_string()]);
        ps.load_bytes(&bytes).unwrap();
        assert!(ps.diff_names(&snapshot).is_empty());
    }
}
