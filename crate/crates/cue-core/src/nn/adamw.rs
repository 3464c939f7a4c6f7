//! AdamW with decoupled weight decay, one-cycle learning rate schedule and
//! global gradient clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::param::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    GlobalNorm,
    Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f32,
    pub peak_lr: f32,
    pub warmup_frac: f32,
    pub final_lr_frac: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip: f32,
    pub clip_mode: ClipMode,
    pub epochs: usize,
    pub batch_tokens: usize,
    /// Fixed shard count for deterministic parallel gradient reduction.
    pub grad_shards: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 1e-4,
            peak_lr: 4e-3,
            warmup_frac: 0.3,
            final_lr_frac: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.95,
            clip_mode: ClipMode::GlobalNorm,
            epochs: 10,
            batch_tokens: 8192,
            grad_shards: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.peak_lr < self.base_lr {
            return Err(crate::CueError::InvalidConfig(
                "peak learning rate must be >= base learning rate".into(),
            ));
        }
        if self.clip <= 0.0 {
            return Err(crate::CueError::InvalidConfig(
                "gradient clip threshold must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_tokens == 0 || self.grad_shards == 0 {
            return Err(crate::CueError::InvalidConfig(
                "epochs, batch_tokens and grad_shards must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One-cycle schedule: linear ramp base -> peak over the warmup fraction,
/// then cosine decay peak -> base * final_lr_frac.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneCycle {
    pub base_lr: f32,
    pub peak_lr: f32,
    pub warmup_frac: f32,
    pub final_lr: f32,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn from_config(cfg: &OptimizerConfig, total_steps: usize) -> Self {
        OneCycle {
            base_lr: cfg.base_lr,
            peak_lr: cfg.peak_lr,
            warmup_frac: cfg.warmup_frac,
            final_lr: cfg.base_lr * cfg.final_lr_frac,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr(&self, step: usize) -> f32 {
        let t = (step as f32) / (self.total_steps as f32);
        let warm = self.warmup_frac.clamp(0.0, 1.0);
        if t < warm {
            let p = t / warm.max(1e-9);
            self.base_lr + (self.peak_lr - self.base_lr) * p
        } else {
            let p = ((t - warm) / (1.0 - warm).max(1e-9)).clamp(0.0, 1.0);
            let cos = 0.5 * (1.0 + (std::f32::consts::PI * p).cos());
            self.final_lr + (self.peak_lr - self.final_lr) * cos
        }
    }
}

/// First/second moment buffers for one parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        for buf in self.m.iter().chain(self.v.iter()) {
            match buf {
                Some(b) => {
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    for &x in b.iter() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                None => out.extend_from_slice(&u64::MAX.to_le_bytes()),
            }
        }
        out
    }

    pub fn load_bytes(&mut self, store: &ParamStore, bytes: &[u8]) -> crate::Result<()> {
        let err = || crate::CueError::Other("corrupt optimizer state".into());
        let mut off = 0usize;
        let take8 = |off: &mut usize| -> crate::Result<u64> {
            let v = u64::from_le_bytes(
                bytes
                    .get(*off..*off + 8)
                    .ok_or_else(err)?
                    .try_into()
                    .unwrap(),
            );
            *off += 8;
            Ok(v)
        };
        self.step = take8(&mut off)?;
        let n = store.len();
        let mut bufs: Vec<Option<ArrayD<f32>>> = Vec::with_capacity(2 * n);
        for slot in 0..2 * n {
            let len = take8(&mut off)?;
            if len == u64::MAX {
                bufs.push(None);
                continue;
            }
            let id = super::param::ParamId(slot % n);
            let shape = store.value(id).raw_dim();
            let mut data = Vec::with_capacity(len as usize);
            for _ in 0..len {
                data.push(f32::from_le_bytes(
                    bytes
                        .get(off..off + 4)
                        .ok_or_else(err)?
                        .try_into()
                        .unwrap(),
                ));
                off += 4;
            }
            bufs.push(Some(
                ArrayD::from_shape_vec(shape, data).map_err(|_| err())?,
            ));
        }
        self.v = bufs.split_off(n);
        self.m = bufs;
        Ok(())
    }
}

/// Clips gradients across several stores' buffers at once so the norm is
/// global over the whole trainable set.
pub fn clip_gradients(grads: &mut [&mut Grads], clip: f32, mode: ClipMode) -> f64 {
    match mode {
        ClipMode::GlobalNorm => {
            let norm: f64 = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
            if norm > clip as f64 {
                let factor = (clip as f64 / norm) as f32;
                for g in grads.iter_mut() {
                    g.scale(factor);
                }
            }
            norm
        }
        ClipMode::Value => {
            let mut max: f64 = 0.0;
            for g in grads.iter_mut() {
                for (_, buf) in g.iter_present() {
                    for &x in buf.iter() {
                        max = max.max(x.abs() as f64);
                    }
                }
            }
            for g in grads.iter_mut() {
                g.clamp_values(clip);
            }
            max
        }
    }
}

/// One AdamW update over every parameter that received a gradient.
/// Weight decay is applied to matrices only, never to biases or norms.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f32,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    for (id, g) in grads.iter_present() {
        let m = state.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = state.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        ndarray::Zip::from(m.view_mut())
            .and(v.view_mut())
            .and(g.view())
            .for_each(|m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            });
        let decay = if store.meta(id).shape.len() >= 2 {
            cfg.weight_decay
        } else {
            0.0
        };
        let value = store.value_mut(id);
        ndarray::Zip::from(value.view_mut())
            .and(state.m[id.0].as_ref().unwrap().view())
            .and(state.v[id.0].as_ref().unwrap().view())
            .for_each(|p, &m, &v| {
                let mhat = (m as f64) / bc1;
                let vhat = (v as f64) / bc2;
                let update = mhat / (vhat.sqrt() + cfg.eps as f64);
                *p -= lr * decay * *p + (lr as f64 * update) as f32;
            });
    }
}
