//! The training loop: sampling plan, gradient accumulation, WAL emission,
//! checkpoints and optional delta capture.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{self, GradTensors, ModelParams, PassOptions, Reduction};
use crate::optim::{adamw_step, lr_at, AdamParams, OptState, TrainConfig};
use crate::ring::RingBuffer;
use crate::rng::{op, CounterStream, RngKey};
use crate::wal::{WalSink, WalWriter};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microbatch {
    pub ids: Vec<u64>,
    pub seed64: u64,
}

/// Per-microbatch seed for the `index`-th microbatch of a run.
pub fn microbatch_seed(master_seed: u64, index: u64) -> u64 {
    RngKey::new(master_seed, index, 0, op::MICROBATCH_SEED, 0).bits()
}

/// Microbatches for `cfg.total_steps` logical steps. Each epoch visits the
/// ids in a counter-keyed shuffle of ascending order; the stream is cut into
/// microbatches of `microbatch_size`.
pub fn sample_plan(ids: &[u64], cfg: &TrainConfig) -> Result<Vec<Vec<Microbatch>>> {
    if ids.is_empty() && cfg.total_steps > 0 {
        return Err(Error::EmptyInput("training corpus"));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mbs = cfg.microbatch_size as usize;
    let need = cfg.total_steps as usize * cfg.accum_len as usize * mbs;
    let mut stream = Vec::with_capacity(need);
    let mut epoch = 0u64;
    while stream.len() < need {
        let mut perm = sorted.clone();
        CounterStream::new(cfg.master_seed, epoch, op::SHUFFLE).shuffle(&mut perm);
        stream.extend(perm);
        epoch += 1;
    }
    let mut plan = Vec::with_capacity(cfg.total_steps as usize);
    let mut index = 0u64;
    for t in 0..cfg.total_steps as usize {
        let mut step = Vec::with_capacity(cfg.accum_len as usize);
        for i in 0..cfg.accum_len as usize {
            let at = (t * cfg.accum_len as usize + i) * mbs;
            step.push(Microbatch {
                ids: stream[at..at + mbs].to_vec(),
                seed64: microbatch_seed(cfg.master_seed, index),
            });
            index += 1;
        }
        plan.push(step);
    }
    Ok(plan)
}

/// Gradient of one microbatch under `reduction`. Mean divides by `denom`.
pub fn microbatch_grad(
    params: &ModelParams,
    corpus: &Corpus,
    ids: &[u64],
    seed64: u64,
    opts: PassOptions,
    reduction: Reduction,
    denom: usize,
) -> Result<(GradTensors, f64)> {
    let (mut g, loss) = model::grad_with_loss(params, corpus, ids, seed64, opts)?;
    if reduction == Reduction::Mean {
        g.div_scalar(denom as f32);
    }
    Ok((g, loss))
}

#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    /// Save whenever the completed-step count is a multiple of this.
    pub every: Option<u32>,
    /// Save at these completed-step counts.
    pub at: Vec<u32>,
    /// Also write `ckpt-<step>.bin` files here.
    pub dir: Option<PathBuf>,
}

impl CheckpointPolicy {
    pub fn at(steps: impl IntoIterator<Item = u32>) -> Self {
        Self {
            at: steps.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn every(k: u32) -> Self {
        Self {
            every: Some(k),
            ..Self::default()
        }
    }

    fn wants(&self, step: u32) -> bool {
        self.at.contains(&step) || self.every.is_some_and(|k| k > 0 && step.is_multiple_of(k))
    }
}

pub fn checkpoint_file_name(step: u32) -> String {
    format!("ckpt-{step:06}.bin")
}

static FAULT_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Test hooks for fault injection.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainHooks {
    /// Perturbs each step's gradient by a process-global counter, so two
    /// otherwise identical runs diverge.
    pub nondeterminism: bool,
}

fn inject_fault(g: &mut GradTensors) {
    let n = FAULT_COUNTER.fetch_add(1, Ordering::Relaxed);
    let u = RngKey::new(n, 0, 0, op::FAULT, 0).uniform();
    g.b2[0] += 1e-4 * (1.0 + u);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format_version: u32,
    pub tool_version: String,
    pub run_id: String,
    pub config: TrainConfig,
    pub config_digest: String,
    pub grad_clip: f32,
    pub master_seed: u64,
    pub init_seed: u64,
    pub hash_mode: String,
}

/// Run id derived from the config digest, so identical runs share it.
pub fn run_id(cfg: &TrainConfig) -> [u8; 16] {
    let d = Sha256::digest(cfg.digest().as_bytes());
    d[..16].try_into().unwrap()
}

impl RunMeta {
    pub fn new(cfg: &TrainConfig, keyed: bool) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run_id: hex::encode(run_id(cfg)),
            config: cfg.clone(),
            config_digest: cfg.digest(),
            grad_clip: cfg.grad_clip,
            master_seed: cfg.master_seed,
            init_seed: cfg.init_seed,
            hash_mode: if keyed { "hmac-sha256" } else { "fnv1a64" }.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRunResult {
    pub params: ModelParams,
    pub opt: OptState,
    pub checkpoints: BTreeMap<u32, Checkpoint>,
    /// Summed training loss per logical step.
    pub step_losses: Vec<f64>,
    pub meta: RunMeta,
}

pub struct TrainRun<'a, S: WalSink> {
    pub corpus: &'a Corpus,
    pub cfg: &'a TrainConfig,
    pub wal: &'a mut WalWriter<S>,
    pub policy: CheckpointPolicy,
    pub ring: Option<&'a mut RingBuffer>,
    pub hooks: TrainHooks,
}

impl<S: WalSink> TrainRun<'_, S> {
    fn checkpoint(&self, params: &ModelParams, opt: &OptState, step: u32) -> Checkpoint {
        Checkpoint {
            params: params.clone(),
            opt: opt.clone(),
            meta: CheckpointMeta {
                shape: params.shape,
                logical_step: step,
                config_digest: self.cfg.digest(),
                run_id: hex::encode(run_id(self.cfg)),
            },
        }
    }

    /// Trains from fresh initialization over the sampler's plan.
    pub fn run(self) -> Result<TrainRunResult> {
        let plan = sample_plan(&self.corpus.ids(), self.cfg)?;
        let params = ModelParams::init(self.cfg.shape, self.cfg.init_seed);
        let opt = OptState::new(self.cfg.shape);
        self.run_plan(params, opt, &plan)
    }

    /// Executes `plan` starting from `(params, opt)`.
    pub fn run_plan(
        mut self,
        mut params: ModelParams,
        mut opt: OptState,
        plan: &[Vec<Microbatch>],
    ) -> Result<TrainRunResult> {
        self.cfg.validate()?;
        let hp = AdamParams::from(self.cfg);
        let opts = self.cfg.pass_options();
        let mut checkpoints = BTreeMap::new();
        let mut step_losses = Vec::with_capacity(plan.len());
        let start = u32::try_from(opt.step).map_err(|_| Error::Precondition("step overflow".into()))?;
        if self.policy.wants(start) {
            checkpoints.insert(start, self.save(&params, &opt, start)?);
        }
        for (k, step) in plan.iter().enumerate() {
            let t = start + k as u32;
            if step.is_empty() {
                return Err(Error::EmptyInput("logical step"));
            }
            let lr = lr_at(opt.step as u32, self.cfg)?;
            let mut total = GradTensors::zeros(params.shape);
            let mut loss = 0.0f64;
            for (i, mb) in step.iter().enumerate() {
                let (g, l) = microbatch_grad(
                    &params,
                    self.corpus,
                    &mb.ids,
                    mb.seed64,
                    opts,
                    self.cfg.reduction,
                    mb.ids.len(),
                )?;
                total.add_assign(&g);
                loss += l;
                self.wal.emit(&mb.ids, mb.seed64, lr, t, i + 1 == step.len())?;
            }
            if self.hooks.nondeterminism {
                inject_fault(&mut total);
            }
            let pre = self.ring.is_some().then(|| (params.clone(), opt.clone()));
            adamw_step(&mut params, &mut opt, &total, lr, &hp)?;
            if let (Some(ring), Some((pp, po))) = (self.ring.as_deref_mut(), pre) {
                ring.capture(&pp, &po, &params, &opt, t)?;
            }
            step_losses.push(loss);
            if self.policy.wants(t + 1) {
                checkpoints.insert(t + 1, self.save(&params, &opt, t + 1)?);
            }
        }
        let meta = RunMeta::new(self.cfg, self.wal.key().is_some());
        Ok(TrainRunResult {
            params,
            opt,
            checkpoints,
            step_losses,
            meta,
        })
    }

    fn save(&self, params: &ModelParams, opt: &OptState, step: u32) -> Result<Checkpoint> {
        let c = self.checkpoint(params, opt, step);
        if let Some(dir) = &self.policy.dir {
            std::fs::create_dir_all(dir)?;
            c.save(&dir.join(checkpoint_file_name(step)))?;
        }
        Ok(c)
    }
}

/// Trains on `corpus` into `wal` with no ring and default hooks.
pub fn train<S: WalSink>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    wal: &mut WalWriter<S>,
    policy: CheckpointPolicy,
) -> Result<TrainRunResult> {
    TrainRun {
        corpus,
        cfg,
        wal,
        policy,
        ring: None,
        hooks: TrainHooks::default(),
    }
    .run()
}
