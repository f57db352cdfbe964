//! Training configuration, learning-rate schedule and AdamW.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GradTensors, ModelParams, ModelShape, PassOptions, Reduction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f32,
    pub warmup_steps: u32,
    pub total_steps: u32,
    pub cosine_floor: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub accum_len: u32,
    pub microbatch_size: u32,
    pub master_seed: u64,
    pub init_seed: u64,
    pub dropout: f32,
    pub reduction: Reduction,
    pub shape: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-3,
            warmup_steps: 10,
            total_steps: 200,
            cosine_floor: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            accum_len: 2,
            microbatch_size: 5,
            master_seed: 1234,
            init_seed: 42,
            dropout: 0.0,
            reduction: Reduction::Sum,
            shape: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if self.accum_len == 0 || self.accum_len > u8::MAX as u32 {
            return bad("accum_len must be in 1..=255");
        }
        if self.microbatch_size == 0 || self.microbatch_size > u16::MAX as u32 {
            return bad("microbatch_size must be in 1..=65535");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 || !self.cosine_floor.is_finite() {
            return bad("learning rates must be finite and non-negative");
        }
        self.shape.validate()
    }

    pub fn pass_options(&self) -> PassOptions {
        PassOptions {
            dropout: self.dropout,
        }
    }

    /// SHA-256 of the canonical JSON encoding, used as a replay pin.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Learning rate for the `index`-th applied update: linear warmup from zero,
/// then half-cosine decay from `base_lr` to `cosine_floor` over the remaining
/// steps. Evaluated in f64 and rounded once to f32.
pub fn lr_at(index: u32, cfg: &TrainConfig) -> Result<f32> {
    if index >= cfg.total_steps {
        return Err(Error::OutOfRange {
            what: "lr schedule index",
            index: index as u64,
            limit: cfg.total_steps as u64,
        });
    }
    let base = cfg.base_lr as f64;
    let floor = cfg.cosine_floor as f64;
    let w = cfg.warmup_steps;
    let lr = if index < w {
        base * index as f64 / w as f64
    } else {
        let span = (cfg.total_steps - w) as f64;
        let progress = (index - w) as f64 / span;
        base - (base - floor) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
    };
    Ok(lr as f32)
}

/// Adam moments and the applied-update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub exp_avg: ModelParams,
    pub exp_avg_sq: ModelParams,
    pub step: u64,
}

impl OptState {
    pub fn new(shape: ModelShape) -> Self {
        Self {
            exp_avg: ModelParams::zeros(shape),
            exp_avg_sq: ModelParams::zeros(shape),
            step: 0,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.exp_avg.bit_eq(&other.exp_avg)
            && self.exp_avg_sq.bit_eq(&other.exp_avg_sq)
    }
}

/// Hyperparameters consumed by a single AdamW step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub grad_clip: Option<f32>,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            grad_clip: Some(c.grad_clip),
        }
    }
}

/// Global L2 norm over slices, accumulated in f64 in order.
pub fn global_norm<'a>(tensors: impl IntoIterator<Item = &'a [f32]>) -> f64 {
    let mut acc = 0.0f64;
    for t in tensors {
        for &v in t {
            acc += (v as f64) * (v as f64);
        }
    }
    acc.sqrt()
}

/// Scale factor applied to gradients with global norm `norm`, or `None`.
pub fn clip_coef(norm: f64, clip: f32) -> Option<f32> {
    let coef = clip as f64 / (norm + 1e-6);
    (coef < 1.0).then_some(coef as f32)
}

/// One AdamW step over parallel slices, with the step counter already
/// incremented to `step`. Decoupled decay precedes the moment update.
pub fn adamw_kernel(
    params: &mut [f32],
    grad: &[f32],
    exp_avg: &mut [f32],
    exp_avg_sq: &mut [f32],
    step: u64,
    lr: f32,
    hp: &AdamParams,
) {
    let bc1 = 1.0 - (hp.beta1 as f64).powf(step as f64) as f32;
    let bc2 = 1.0 - (hp.beta2 as f64).powf(step as f64) as f32;
    let bc2_sqrt = bc2.sqrt();
    let step_size = lr / bc1;
    let decay = 1.0 - lr * hp.weight_decay;
    for i in 0..params.len() {
        let g = grad[i];
        let p = params[i] * decay;
        let m = exp_avg[i] * hp.beta1 + g * (1.0 - hp.beta1);
        let v = exp_avg_sq[i] * hp.beta2 + g * g * (1.0 - hp.beta2);
        exp_avg[i] = m;
        exp_avg_sq[i] = v;
        let denom = v.sqrt() / bc2_sqrt + hp.eps;
        params[i] = p - step_size * (m / denom);
    }
}

/// Clips `grad` to the configured global norm, applies AdamW in place and
/// increments `opt.step` by one.
pub fn adamw_step(
    params: &mut ModelParams,
    opt: &mut OptState,
    grad: &GradTensors,
    lr: f32,
    hp: &AdamParams,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NumericFault("non-finite gradient at update".into()));
    }
    if !grad.same_shape(params) || !opt.exp_avg.same_shape(params) {
        return Err(Error::ShapeMismatch("gradient or moments do not match params".into()));
    }
    let mut g = grad.clone();
    if let Some(c) = hp.grad_clip {
        if let Some(coef) = clip_coef(global_norm(g.tensors()), c) {
            g.scale(coef);
        }
    }
    opt.step += 1;
    let step = opt.step;
    let pt = params.tensors_mut();
    let mt = opt.exp_avg.tensors_mut();
    let vt = opt.exp_avg_sq.tensors_mut();
    for (((p, gr), m), v) in pt.into_iter().zip(g.tensors()).zip(mt).zip(vt) {
        adamw_kernel(p, gr, m, v, step, lr, hp);
    }
    if !params.is_finite() {
        return Err(Error::NumericFault(format!("non-finite parameters after update {step}")));
    }
    Ok(())
}

/// Pure form of [`adamw_step`].
pub fn adamw_update(
    params: &ModelParams,
    opt: &OptState,
    grad: &GradTensors,
    lr: f32,
    hp: &AdamParams,
) -> Result<(ModelParams, OptState)> {
    let (mut p, mut o) = (params.clone(), opt.clone());
    adamw_step(&mut p, &mut o, grad, lr, hp)?;
    Ok((p, o))
}
