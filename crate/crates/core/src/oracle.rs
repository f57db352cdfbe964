//! Retain-only reference training over the logged microbatch graph.
//!
//! Built independently of the replay loop: the WAL is first compiled into a
//! retain-only program (one entry per logical step that keeps at least one
//! example), which is then executed.

use std::collections::BTreeSet;

use crate::checkpoint::state_hash;
use crate::error::{Error, Result};
use crate::model::{example_grad, GradTensors, ModelParams, Reduction};
use crate::optim::{adamw_step, AdamParams};
use crate::replay::{ReplayInputs, ReplayOutcome, ReplayReport};

struct ProgramBatch {
    ids: Vec<u64>,
    seed64: u64,
    logged_len: usize,
}

struct ProgramStep {
    logical: u32,
    lr: f32,
    batches: Vec<ProgramBatch>,
}

struct Program {
    steps: Vec<ProgramStep>,
    dropped: u64,
    range: Option<(u32, u32)>,
}

fn compile(inp: &ReplayInputs) -> Result<Program> {
    let retain: BTreeSet<u64> = inp
        .corpus
        .ids()
        .into_iter()
        .filter(|id| !inp.closure.expanded.contains(id))
        .collect();
    let mut steps = Vec::new();
    let mut dropped = 0u64;
    let mut range = None;
    let mut pending: Vec<ProgramBatch> = Vec::new();
    for rec in inp.wal.records(inp.key)? {
        if rec.opt_step_u32 < inp.ckpt.meta.logical_step {
            continue;
        }
        let ids = inp.manifest.resolve(&rec, inp.key)?;
        let kept: Vec<u64> = ids.iter().copied().filter(|id| retain.contains(id)).collect();
        let unresolvable = ids
            .iter()
            .find(|id| !inp.corpus.contains(**id) && !inp.closure.contains(**id));
        if let Some(&missing) = unresolvable {
            return Err(Error::MissingSample(missing));
        }
        if !kept.is_empty() {
            pending.push(ProgramBatch {
                ids: kept,
                seed64: rec.seed64,
                logged_len: rec.mb_len as usize,
            });
        }
        if rec.accum_end {
            let t = rec.opt_step_u32;
            range = Some(range.map_or((t, t), |(a, _): (u32, u32)| (a, t)));
            if pending.is_empty() {
                dropped += 1;
            } else {
                steps.push(ProgramStep {
                    logical: t,
                    lr: rec.lr_f32,
                    batches: std::mem::take(&mut pending),
                });
            }
        }
    }
    Ok(Program { steps, dropped, range })
}

/// Trains on the retained examples of each logged microbatch, in logged
/// order, with the logged seeds and learning rates.
///
/// `masked_mean` selects the normalization used for mean-reduction runs:
/// the logged microbatch size rather than the retained count.
pub fn oracle_retain_train(inp: &ReplayInputs, masked_mean: bool) -> Result<ReplayOutcome> {
    inp.check_pins(masked_mean)?;
    let program = compile(inp)?;
    let hp = AdamParams::from(inp.cfg);
    let pass = inp.cfg.pass_options();
    let mut params: ModelParams = inp.ckpt.params.clone();
    let mut opt = inp.ckpt.opt.clone();
    let mut lr_trace = Vec::with_capacity(program.steps.len());
    for step in &program.steps {
        let mut step_grad = GradTensors::zeros(params.shape);
        for batch in &step.batches {
            let mut batch_grad = GradTensors::zeros(params.shape);
            for &id in &batch.ids {
                let (g, _) = example_grad(&params, inp.corpus, id, batch.seed64, pass)?;
                batch_grad.add_assign(&g);
            }
            if !batch_grad.is_finite() {
                return Err(Error::NumericFault(format!("oracle gradient at step {}", step.logical)));
            }
            if inp.cfg.reduction == Reduction::Mean {
                batch_grad.div_scalar(batch.logged_len as f32);
            }
            step_grad.add_assign(&batch_grad);
        }
        lr_trace.push((opt.step, step.lr));
        adamw_step(&mut params, &mut opt, &step_grad, step.lr, &hp)?;
    }
    let report = ReplayReport {
        applied_steps: program.steps.len() as u64,
        empty_logical_steps: program.dropped,
        logical_range: program.range,
        wal_segment_digest: inp.wal.digest(),
        final_state_hash: hex::encode(state_hash(&params, &opt)),
        lr_trace,
    };
    Ok(ReplayOutcome { params, opt, report })
}
