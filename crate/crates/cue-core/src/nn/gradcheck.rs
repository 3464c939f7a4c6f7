//! Central finite-difference checks for every layer's backward pass.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::rng::derive;

/// Weighted sum of the output against a fixed random matrix; its gradient
/// with respect to the output is exactly that matrix.
fn loss_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0f32..1.0))
}

fn weighted(out: &Array2<f32>, w: &Array2<f32>) -> f64 {
    out.iter().zip(w.iter()).map(|(&a, &b)| (a as f64) * (b as f64)).sum()
}

/// Compares analytic gradients against central differences.
///
/// `loss` must recompute the full forward from the (possibly perturbed)
/// store. Entries are subsampled with a fixed stride for speed.
fn check_store_grads(
    store: &mut ParamStore,
    grads: &Grads,
    loss: &dyn Fn(&ParamStore) -> f64,
    tol: f64,
) {
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let g = g.clone();
        let n = g.len();
        let stride = (n / 24).max(1);
        for flat in (0..n).step_by(stride) {
            let orig = store.value(id).as_slice().unwrap()[flat];
            let h = (orig.abs() * 1e-2).max(3e-3);
            set_flat(store, id, flat, orig + h);
            let up = loss(store);
            set_flat(store, id, flat, orig - h);
            let down = loss(store);
            set_flat(store, id, flat, orig);
            let numeric = (up - down) / (2.0 * h as f64);
            let analytic = g.as_slice().unwrap()[flat] as f64;
            let scale = numeric.abs().max(analytic.abs());
            if scale < 5e-3 || (numeric - analytic).abs() < 1e-3 {
                continue;
            }
            let rel = (numeric - analytic).abs() / scale;
            assert!(
                rel < tol,
                "param {} [{}]: numeric {numeric:.6} vs analytic {analytic:.6} (rel {rel:.4})",
                store.meta(id).name,
                flat
            );
        }
    }
}

fn set_flat(store: &mut ParamStore, id: ParamId, flat: usize, value: f32) {
    store.value_mut(id).as_slice_mut().unwrap()[flat] = value;
}

fn check_input_grad(
    x: &Array2<f32>,
    dx: &Array2<f32>,
    loss: &dyn Fn(&Array2<f32>) -> f64,
    tol: f64,
) {
    let n = x.len();
    let stride = (n / 24).max(1);
    for flat in (0..n).step_by(stride) {
        let mut xp = x.clone();
        let orig = xp.as_slice().unwrap()[flat];
        let h = (orig.abs() * 1e-2).max(3e-3);
        xp.as_slice_mut().unwrap()[flat] = orig + h;
        let up = loss(&xp);
        xp.as_slice_mut().unwrap()[flat] = orig - h;
        let down = loss(&xp);
        let numeric = (up - down) / (2.0 * h as f64);
        let analytic = dx.as_slice().unwrap()[flat] as f64;
        let scale = numeric.abs().max(analytic.abs());
        if scale < 5e-3 || (numeric - analytic).abs() < 1e-3 {
            continue;
        }
        let rel = (numeric - analytic).abs() / scale;
        assert!(rel < tol, "input [{flat}]: numeric {numeric:.6} vs analytic {analytic:.6}");
    }
}

fn rand_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.8f32..0.8))
}

const ALL_GROUPS: [ParamGroup; 7] = ParamGroup::ALL;

#[test]
fn linear_grads() {
    let mut rng = derive(11, "gc-linear");
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "l", ParamGroup::Decoder, 5, 7, true, &mut rng);
    let x = rand_input(&mut rng, 4, 5);
    let w = loss_weights(&mut rng, 4, 7);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let dx = lin.backward(&ps, &x, &w, &mut grads);
    check_store_grads(&mut ps, &grads, &|ps| weighted(&lin.forward(ps, &x), &w), 2e-2);
    check_input_grad(&x, &dx, &|x| weighted(&lin.forward(&ps, x), &w), 2e-2);
}

#[test]
fn layernorm_grads() {
    let mut rng = derive(12, "gc-ln");
    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "ln", ParamGroup::Decoder, 6, &mut rng);
    // move gamma off exactly one
    let gamma: Array1<f32> = (0..6).map(|i| 1.0 + 0.1 * i as f32).collect();
    ps.set1(ln.gamma, gamma);
    let x = rand_input(&mut rng, 3, 6);
    let w = loss_weights(&mut rng, 3, 6);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let (_, cache) = ln.forward(&ps, &x);
    let dx = ln.backward(&ps, &cache, &w, &mut grads);
    check_store_grads(&mut ps, &grads, &|ps| weighted(&ln.forward(ps, &x).0, &w), 2e-2);
    check_input_grad(&x, &dx, &|x| weighted(&ln.forward(&ps, x).0, &w), 2e-2);
}

#[test]
fn embedding_grads() {
    let mut rng = derive(13, "gc-emb");
    let mut ps = ParamStore::new();
    let emb = Embedding::new(&mut ps, "emb", ParamGroup::Decoder, 9, 4, &mut rng);
    let ids: Vec<u32> = vec![1, 7, 1, 3];
    let w = loss_weights(&mut rng, 4, 4);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    emb.backward(&ps, &ids, &w, &mut grads);
    check_store_grads(&mut ps, &grads, &|ps| weighted(&emb.forward(ps, &ids), &w), 2e-2);
}

#[test]
fn causal_attention_grads() {
    let mut rng = derive(14, "gc-attn");
    let mut ps = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ps, "a", ParamGroup::Decoder, 8, 2, &mut rng);
    let x = rand_input(&mut rng, 5, 8);
    let w = loss_weights(&mut rng, 5, 8);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let (_, cache) = attn.forward(&ps, &x, &x, true);
    let (dq, dkv) = attn.backward(&ps, &x, &x, &cache, &w, &mut grads);
    let dx = dq + dkv;
    check_store_grads(&mut ps, &grads, &|ps| weighted(&attn.forward(ps, &x, &x, true).0, &w), 2e-2);
    check_input_grad(&x, &dx, &|x| weighted(&attn.forward(&ps, x, x, true).0, &w), 2e-2);
}

#[test]
fn bidirectional_self_attention_grads() {
    let mut rng = derive(21, "gc-biattn");
    let mut ps = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ps, "b", ParamGroup::Decoder, 8, 2, &mut rng);
    let x = rand_input(&mut rng, 3, 8);
    let w = loss_weights(&mut rng, 3, 8);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let (_, cache) = attn.forward(&ps, &x, &x, false);
    let (dq, dkv) = attn.backward(&ps, &x, &x, &cache, &w, &mut grads);
    let dx = dq + dkv;
    check_store_grads(&mut ps, &grads, &|ps| weighted(&attn.forward(ps, &x, &x, false).0, &w), 2e-2);
    check_input_grad(&x, &dx, &|x| weighted(&attn.forward(&ps, x, x, false).0, &w), 2e-2);
}

#[test]
fn cross_attention_grads_flow_to_memory() {
    let mut rng = derive(15, "gc-cross");
    let mut ps = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ps, "c", ParamGroup::Decoder, 8, 2, &mut rng);
    let x = rand_input(&mut rng, 4, 8);
    let mem = rand_input(&mut rng, 1, 8);
    let w = loss_weights(&mut rng, 4, 8);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let (_, cache) = attn.forward(&ps, &x, &mem, false);
    let (_, dmem) = attn.backward(&ps, &x, &mem, &cache, &w, &mut grads);
    check_store_grads(&mut ps, &grads, &|ps| weighted(&attn.forward(ps, &x, &mem, false).0, &w), 2e-2);
    check_input_grad(&mem, &dmem, &|m| weighted(&attn.forward(&ps, &x, m, false).0, &w), 2e-2);
}

#[test]
fn transformer_block_grads() {
    let mut rng = derive(16, "gc-block");
    let mut ps = ParamStore::new();
    let block = TransformerBlock::new(&mut ps, "b", ParamGroup::Decoder, 8, 2, 16, true, &mut rng);
    // Spread the FFN pre-activations away from the ReLU kink, where central
    // differences are meaningless.
    for i in 0..ps.len() {
        let id = ParamId(i);
        if ps.meta(id).name.contains("ffn") && ps.meta(id).shape.len() == 2 {
            let scaled = ps.value(id).mapv(|v| v * 25.0);
            *ps.value_mut(id) = scaled;
        }
    }
    let x = rand_input(&mut rng, 4, 8);
    let mem = rand_input(&mut rng, 1, 8);
    let w = loss_weights(&mut rng, 4, 8);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let (_, cache) = block.forward(&ps, &x, Some(&mem), true);
    let (dx, dmem) = block.backward(&ps, &cache, Some(&mem), &w, &mut grads);
    check_store_grads(
        &mut ps,
        &grads,
        &|ps| weighted(&block.forward(ps, &x, Some(&mem), true).0, &w),
        4e-2,
    );
    check_input_grad(&x, &dx, &|x| weighted(&block.forward(&ps, x, Some(&mem), true).0, &w), 4e-2);
    check_input_grad(
        &mem,
        &dmem.unwrap(),
        &|m| weighted(&block.forward(&ps, &x, Some(m), true).0, &w),
        4e-2,
    );
}

#[test]
fn lstm_grads() {
    let mut rng = derive(17, "gc-lstm");
    let mut ps = ParamStore::new();
    let lstm = LstmLayer::new(&mut ps, "r", ParamGroup::SentenceEncoder, 5, 6, &mut rng);
    let x = rand_input(&mut rng, 7, 5);
    let w = loss_weights(&mut rng, 7, 6);

    let mut grads = Grads::new(&ps, &ALL_GROUPS);
    let (_, cache) = lstm.forward(&ps, &x);
    let dx = lstm.backward(&ps, &cache, &w, &mut grads);
    check_store_grads(&mut ps, &grads, &|ps| weighted(&lstm.forward(ps, &x).0, &w), 2.5e-2);
    check_input_grad(&x, &dx, &|x| weighted(&lstm.forward(&ps, x).0, &w), 2.5e-2);
}

#[test]
fn nll_backward_matches_finite_difference() {
    let mut rng = derive(18, "gc-nll");
    let logits = rand_input(&mut rng, 4, 9);
    let targets = vec![2u32, 5, 8, 0];
    let score = vec![true, true, false, true];
    let forbidden = vec![1u32];

    let (_, _, dlogits) = nll_sum_backward(&logits, &targets, &score, &forbidden);
    let loss = |l: &Array2<f32>| nll_sum(l, &targets, &score, &forbidden).0;
    check_input_grad(&logits, &dlogits, &loss, 2e-2);
}
