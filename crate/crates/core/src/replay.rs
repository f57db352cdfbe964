//! Filtered replay of the WAL tail and the equality proof.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_hash, opt_hash, state_hash, Checkpoint};
use crate::closure::ForgetClosure;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{GradTensors, ModelParams, Reduction};
use crate::optim::{adamw_step, AdamParams, OptState, TrainConfig};
use crate::train::microbatch_grad;
use crate::wal::{IdManifest, Wal};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub applied_steps: u64,
    pub empty_logical_steps: u64,
    /// First and last logical step traversed, if any.
    pub logical_range: Option<(u32, u32)>,
    pub wal_segment_digest: String,
    pub final_state_hash: String,
    /// `(applied update index, lr)` for every update applied.
    pub lr_trace: Vec<(u64, f32)>,
}

impl ReplayReport {
    pub fn traversed(&self) -> u64 {
        self.applied_steps + self.empty_logical_steps
    }
}

#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub params: ModelParams,
    pub opt: OptState,
    pub report: ReplayReport,
}

impl ReplayOutcome {
    /// Checkpoint of this state at the next logical step.
    pub fn checkpoint(&self, base: &Checkpoint) -> Checkpoint {
        let mut meta = base.meta.clone();
        if let Some((_, last)) = self.report.logical_range {
            meta.logical_step = last + 1;
        }
        Checkpoint {
            params: self.params.clone(),
            opt: self.opt.clone(),
            meta,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReplayOptions {
    /// Skip logical steps whose microbatches all empty after filtering.
    /// Turning this off applies a zero-gradient update instead (test hook).
    pub skip_empty_steps: bool,
    /// Stop after this many logical steps.
    pub max_steps: Option<u32>,
    /// Permit mean-reduction configs (for the counterexample only).
    pub allow_mean: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            skip_empty_steps: true,
            max_steps: None,
            allow_mean: false,
        }
    }
}

/// Inputs shared by replay and the oracle.
#[derive(Clone, Copy)]
pub struct ReplayInputs<'a> {
    pub ckpt: &'a Checkpoint,
    pub wal: &'a Wal,
    pub manifest: &'a IdManifest,
    pub closure: &'a ForgetClosure,
    pub corpus: &'a Corpus,
    pub cfg: &'a TrainConfig,
    pub key: Option<&'a [u8]>,
}

impl ReplayInputs<'_> {
    /// Refuses to run when the checkpoint was produced under different pins.
    pub fn check_pins(&self, allow_mean: bool) -> Result<()> {
        self.cfg.validate()?;
        if self.ckpt.meta.config_digest != self.cfg.digest() {
            return Err(Error::PinDrift(format!(
                "checkpoint config digest {} differs from {}",
                self.ckpt.meta.config_digest,
                self.cfg.digest()
            )));
        }
        if self.ckpt.meta.shape != self.cfg.shape {
            return Err(Error::PinDrift("checkpoint shape differs from config".into()));
        }
        if self.cfg.reduction != Reduction::Sum && !allow_mean {
            return Err(Error::Precondition(
                "exact replay requires sum reduction".into(),
            ));
        }
        Ok(())
    }

    /// Logical steps skipped before the checkpoint was taken.
    fn step_offset(&self) -> Result<u64> {
        (self.ckpt.meta.logical_step as u64)
            .checked_sub(self.ckpt.opt.step)
            .ok_or_else(|| Error::Precondition("checkpoint opt.step exceeds its logical step".into()))
    }
}

/// Replays the WAL tail from the checkpoint, dropping closure ids from each
/// microbatch while keeping order, seeds and the recorded learning rates.
pub fn replay_filter(inp: &ReplayInputs, opts: ReplayOptions) -> Result<ReplayOutcome> {
    inp.check_pins(opts.allow_mean)?;
    let groups = inp.wal.read_tail(inp.ckpt.meta.logical_step, inp.key)?;
    let hp = AdamParams::from(inp.cfg);
    let pass = inp.cfg.pass_options();
    let offset = inp.step_offset()?;
    let mut params = inp.ckpt.params.clone();
    let mut opt = inp.ckpt.opt.clone();
    let mut report = ReplayReport {
        wal_segment_digest: inp.wal.digest(),
        ..ReplayReport::default()
    };
    let limit = opts.max_steps.map_or(usize::MAX, |m| m as usize);
    for group in groups.iter().take(limit) {
        let last = group.last().expect("groups are nonempty");
        let t = last.opt_step_u32;
        report.logical_range = Some(match report.logical_range {
            None => (t, t),
            Some((a, _)) => (a, t),
        });
        let mut total = GradTensors::zeros(params.shape);
        let mut contributed = false;
        for rec in group {
            let ids = inp.manifest.resolve(rec, inp.key)?;
            let kept: Vec<u64> = ids.iter().copied().filter(|id| !inp.closure.contains(*id)).collect();
            if kept.is_empty() {
                continue;
            }
            let (g, _) = microbatch_grad(&params, inp.corpus, &kept, rec.seed64, pass, inp.cfg.reduction, kept.len())?;
            total.add_assign(&g);
            contributed = true;
        }
        if !contributed && opts.skip_empty_steps {
            report.empty_logical_steps += 1;
            continue;
        }
        let implied = opt.step + offset + report.empty_logical_steps;
        if implied != t as u64 {
            return Err(Error::OptStepMismatch {
                logical_step: t,
                expected: t as u64,
                found: implied,
            });
        }
        report.lr_trace.push((opt.step, last.lr_f32));
        adamw_step(&mut params, &mut opt, &total, last.lr_f32, &hp)?;
        report.applied_steps += 1;
    }
    report.final_state_hash = hex::encode(state_hash(&params, &opt));
    Ok(ReplayOutcome { params, opt, report })
}

/// Logical steps whose microbatches contain any closure id.
pub fn influence_steps(
    wal: &Wal,
    manifest: &IdManifest,
    closure: &ForgetClosure,
    key: Option<&[u8]>,
) -> Result<BTreeSet<u32>> {
    let mut out = BTreeSet::new();
    for r in wal.records(key)? {
        if manifest.resolve(&r, key)?.iter().any(|id| closure.contains(*id)) {
            out.insert(r.opt_step_u32);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProofStatus {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentEquality {
    pub params: bool,
    pub exp_avg: bool,
    pub exp_avg_sq: bool,
    pub step: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityProof {
    pub status: ProofStatus,
    pub model_hash_oracle: String,
    pub model_hash_replay: String,
    pub opt_hash_oracle: String,
    pub opt_hash_replay: String,
    pub component_equality: ComponentEquality,
    pub max_abs_param_diff: f32,
    pub replay_invariants: ReplayReport,
    pub oracle_invariants: ReplayReport,
    pub wal_sha256: String,
}

impl EqualityProof {
    pub fn passed(&self) -> bool {
        self.status == ProofStatus::Pass
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn prove_equality(oracle: &ReplayOutcome, replay: &ReplayOutcome, wal_digest: &str) -> Result<EqualityProof> {
    if !oracle.params.same_shape(&replay.params) {
        return Err(Error::ShapeMismatch("oracle and replay states differ in shape".into()));
    }
    let flags = ComponentEquality {
        params: oracle.params.bit_eq(&replay.params),
        exp_avg: oracle.opt.exp_avg.bit_eq(&replay.opt.exp_avg),
        exp_avg_sq: oracle.opt.exp_avg_sq.bit_eq(&replay.opt.exp_avg_sq),
        step: oracle.opt.step == replay.opt.step,
    };
    let mo = hex::encode(model_hash(&oracle.params));
    let mr = hex::encode(model_hash(&replay.params));
    let oo = hex::encode(opt_hash(&oracle.opt));
    let or = hex::encode(opt_hash(&replay.opt));
    let pass = mo == mr && oo == or && flags.params && flags.exp_avg && flags.exp_avg_sq && flags.step;
    Ok(EqualityProof {
        status: if pass { ProofStatus::Pass } else { ProofStatus::Fail },
        model_hash_oracle: mo,
        model_hash_replay: mr,
        opt_hash_oracle: oo,
        opt_hash_replay: or,
        component_equality: flags,
        max_abs_param_diff: oracle.params.max_abs_diff(&replay.params),
        replay_invariants: replay.report.clone(),
        oracle_invariants: oracle.report.clone(),
        wal_sha256: wal_digest.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionDivergence {
    pub reduction: Reduction,
    pub max_abs_diff: f32,
    pub replay_state_hash: String,
    pub oracle_state_hash: String,
}

/// Runs replay and the oracle under `cfg.reduction` and reports how far
/// they drift apart. Under mean reduction the replay renormalizes by the
/// filtered microbatch size while the retain-only program keeps the logged
/// size, so any cardinality change produces a nonzero difference.
pub fn reduction_divergence(inp: &ReplayInputs) -> Result<ReductionDivergence> {
    let opts = ReplayOptions {
        allow_mean: true,
        ..ReplayOptions::default()
    };
    let r = replay_filter(inp, opts)?;
    let o = crate::oracle::oracle_retain_train(inp, true)?;
    Ok(ReductionDivergence {
        reduction: inp.cfg.reduction,
        max_abs_diff: r.params.max_abs_diff(&o.params),
        replay_state_hash: r.report.final_state_hash,
        oracle_state_hash: o.report.final_state_hash,
    })
}

/// [`reduction_divergence`] for a mean-reduction run.
pub fn mean_reduction_counterexample(inp: &ReplayInputs) -> Result<ReductionDivergence> {
    if inp.cfg.reduction != Reduction::Mean {
        return Err(Error::Precondition("counterexample needs a mean-reduction run".into()));
    }
    reduction_divergence(inp)
}
