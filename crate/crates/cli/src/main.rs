//! `unlearn`: operator CLI over a workspace directory.
//!
//! Exit codes: 0 ok, 1 audit failure, 2 integrity failure, 3 precondition
//! or pin drift.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use unlearn_core::audits::{run_audit_suite, AuditInputs, AuditThresholds};
use unlearn_core::budget::{budget_report, BudgetInputs};
use unlearn_core::checkpoint::{model_hash, Checkpoint};
use unlearn_core::closure::{expand_closure, ForgetClosure};
use unlearn_core::controller::{
    ci_gate, system_clock, verify_chain, ChainVerdict, CiFaults, Controller, FaultHooks, ForgetRequest, Outcome,
    Urgency,
};
use unlearn_core::corpus::{generate, CorpusProfile};
use unlearn_core::oracle::oracle_retain_train;
use unlearn_core::pipeline::{build_deployment, PipelineConfig};
use unlearn_core::replay::{influence_steps, prove_equality, replay_filter, ReplayInputs, ReplayOptions};
use unlearn_core::ring::PatchMode;
use unlearn_core::store::Workspace;
use unlearn_core::Error;

const EXIT_AUDIT: u8 = 1;
const EXIT_INTEGRITY: u8 = 2;
const EXIT_PRECONDITION: u8 = 3;

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Deterministic training-data unlearning")]
struct Cli {
    /// Workspace directory.
    #[arg(short, long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// Key for WAL content hashes.
    #[arg(long, global = true, env = "UNLEARN_WAL_KEY", default_value = "deployment-key", hide_env_values = true)]
    wal_key: String,
    /// Key for manifest entry tags.
    #[arg(long, global = true, env = "UNLEARN_MANIFEST_KEY", default_value = "manifest-key", hide_env_values = true)]
    manifest_key: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RingMode {
    Xor,
    Arith,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `corpus/`.
    GenCorpus {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON corpus profile; flags override its fields.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Train the base run and cohort adapters.
    Train {
        #[arg(long)]
        steps: Option<u32>,
        #[arg(long)]
        warmup: Option<u32>,
        #[arg(long, default_value_t = 25)]
        checkpoint_every: u32,
        #[arg(long, default_value_t = 16)]
        window: usize,
        #[arg(long, value_enum, default_value = "xor")]
        ring_mode: RingMode,
    },
    /// Filtered replay against the retain-only oracle; nothing is committed.
    Replay {
        /// Sample ids to forget, comma separated.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        /// Skip near-duplicate expansion.
        #[arg(long)]
        exact: bool,
        /// Start from this checkpoint instead of the latest one before the first influenced step.
        #[arg(long)]
        from: Option<u32>,
    },
    /// Undo the newest `u` steps from the ring; nothing is committed.
    Revert {
        #[arg(short)]
        u: u32,
    },
    /// Route and execute a forget request.
    Forget {
        /// Request JSON file.
        #[arg(long, conflicts_with = "ids")]
        request: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long)]
        request_id: Option<u128>,
        #[arg(long)]
        urgent: bool,
        /// Fault injection: fail the hot-path audit.
        #[arg(long, hide = true)]
        fail_hot_path_audit: bool,
    },
    /// Run the audit suite on the served model or a checkpoint.
    Audit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Determinism, replay and WAL integrity gate.
    CiGate {
        #[arg(long, hide = true)]
        inject_nondeterminism: bool,
        #[arg(long, hide = true)]
        truncate_wal: bool,
    },
    /// Verify the WAL, the id manifest and the request manifest chain.
    VerifyWal,
    /// Storage and latency budget table.
    Budget {
        #[arg(long)]
        params: Option<u64>,
        #[arg(long)]
        window: Option<u64>,
        #[arg(long)]
        compress_ratio: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        step_seconds: Option<f64>,
        #[arg(long)]
        per_step_bytes: Option<u64>,
        #[arg(long)]
        json: bool,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Integrity(_)
            | Error::Corruption(_)
            | Error::Manifest(_)
            | Error::OptStepMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::MissingSample(_) => EXIT_INTEGRITY,
            _ => EXIT_PRECONDITION,
        };
        Self { code, msg: e.to_string() }
    }
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let ws = Workspace::new(&cli.workspace);
    let wal_key = Some(cli.wal_key.as_bytes().to_vec());
    match &cli.cmd {
        Command::GenCorpus { size, seed, profile } => gen_corpus(&ws, *size, *seed, profile.as_deref()),
        Command::Train { steps, warmup, checkpoint_every, window, ring_mode } => {
            let mut pc = PipelineConfig { wal_key, checkpoint_every: *checkpoint_every, ring_window: *window, ..PipelineConfig::default() };
            pc.ring_mode = match ring_mode {
                RingMode::Xor => PatchMode::Xor,
                RingMode::Arith => PatchMode::Arith,
            };
            if let Some(s) = steps {
                pc.train.total_steps = *s;
                pc.train.warmup_steps = pc.train.warmup_steps.min(*s);
            }
            if let Some(w) = warmup {
                pc.train.warmup_steps = *w;
            }
            train(&ws, &pc)
        }
        Command::Replay { ids, exact, from } => replay(&ws, wal_key, ids, *exact, *from),
        Command::Revert { u } => revert(&ws, wal_key, *u),
        Command::Forget { request, ids, request_id, urgent, fail_hot_path_audit } => {
            let req = match request {
                Some(p) => ForgetRequest::load(p)?,
                None if ids.is_empty() => return Err(fail(EXIT_PRECONDITION, "give --request or --ids")),
                None => {
                    let set: BTreeSet<u64> = ids.iter().copied().collect();
                    let digest = Sha256::digest(serde_json::to_vec(&set).map_err(Error::from)?);
                    ForgetRequest {
                        request_id: request_id.unwrap_or_else(|| u128::from_be_bytes(digest[..16].try_into().unwrap())),
                        ids: set,
                        urgency: if *urgent { Urgency::Urgent } else { Urgency::Normal },
                        submitted_at: system_clock(),
                    }
                }
            };
            let faults = FaultHooks { fail_hot_path_audit: *fail_hot_path_audit, ..FaultHooks::default() };
            forget(&ws, wal_key, cli.manifest_key.as_bytes(), &req, faults)
        }
        Command::Audit { checkpoint } => audit(&ws, wal_key, checkpoint.as_deref()),
        Command::CiGate { inject_nondeterminism, truncate_wal } => {
            let faults = CiFaults { nondeterminism: *inject_nondeterminism, truncate_last_record: *truncate_wal };
            let (cfg, corpus) = if ws.has_deployment() {
                let (dep, _) = ws.load(wal_key.clone())?;
                (dep.cfg, dep.corpus)
            } else {
                (PipelineConfig::default().train, ws.load_corpus()?.base)
            };
            let rep = ci_gate(&corpus, &cfg, wal_key.as_deref(), faults)?;
            print_json(&rep)?;
            Ok(rep.exit_code() as u8)
        }
        Command::VerifyWal => verify_wal(&ws, wal_key, cli.manifest_key.as_bytes()),
        Command::Budget { params, window, compress_ratio, checkpoint_every, step_seconds, per_step_bytes, json } => {
            let d = BudgetInputs::default();
            let inp = BudgetInputs {
                param_count: params.unwrap_or(d.param_count),
                window: window.unwrap_or(d.window),
                compress_ratio: compress_ratio.unwrap_or(d.compress_ratio),
                checkpoint_every: checkpoint_every.unwrap_or(d.checkpoint_every),
                step_seconds: step_seconds.unwrap_or(d.step_seconds),
                per_step_bytes: per_step_bytes.or(d.per_step_bytes),
                ..d
            };
            let table = budget_report(&inp)?;
            if *json {
                print_json(&table)?;
            } else {
                print!("{}", table.render());
            }
            Ok(0)
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).map_err(Error::from)?);
    Ok(())
}

/// Writes `bytes` under `reports/` at a name derived from its digest.
fn put_report(ws: &Workspace, name: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
    let dir = ws.reports_dir();
    fs::create_dir_all(&dir).map_err(Error::from)?;
    let digest = hex::encode(Sha256::digest(bytes));
    let path = dir.join(format!("{name}-{}.{ext}", &digest[..12]));
    fs::write(&path, bytes).map_err(Error::from)?;
    Ok(path)
}

fn gen_corpus(ws: &Workspace, size: Option<usize>, seed: Option<u64>, profile: Option<&Path>) -> CmdResult {
    let mut p: CorpusProfile = match profile {
        Some(path) => serde_json::from_slice(&fs::read(path).map_err(Error::from)?).map_err(Error::from)?,
        None => CorpusProfile::default(),
    };
    if let Some(s) = size {
        p.size = s;
    }
    if let Some(s) = seed {
        p.seed = s;
    }
    let g = generate(&p)?;
    g.write_dir(&ws.corpus_dir())?;
    print_json(&json!({
        "corpus_dir": ws.corpus_dir(),
        "base": g.base.len(),
        "controls": g.controls.len(),
        "cohort_samples": g.cohorts.len(),
        "forget_request": g.split.forget_request.len(),
        "forget_cohort": g.split.forget_cohort.len(),
        "canaries": g.split.canaries.len(),
    }))?;
    Ok(0)
}

fn train(ws: &Workspace, pc: &PipelineConfig) -> CmdResult {
    let g = ws.load_corpus()?;
    let (dep, _) = build_deployment(&g, pc)?;
    ws.save(&dep, pc)?;
    print_json(&json!({
        "steps": dep.current_step,
        "checkpoints": dep.checkpoints.keys().collect::<Vec<_>>(),
        "ring_patches": dep.ring.len(),
        "wal_records": dep.wal.record_bytes() / 32,
        "wal_sha256": dep.wal.digest(),
        "cohort_adapters": dep.cohorts.keys().collect::<Vec<_>>(),
        "model_hash": hex::encode(model_hash(&dep.params)),
        "served_hash": hex::encode(model_hash(&dep.served()?)),
    }))?;
    Ok(0)
}

fn replay(ws: &Workspace, wal_key: Option<Vec<u8>>, ids: &[u64], exact: bool, from: Option<u32>) -> CmdResult {
    let (dep, _) = ws.load(wal_key)?;
    let request: BTreeSet<u64> = ids.iter().copied().collect();
    let closure = if exact {
        ForgetClosure::exact(request.iter().copied())
    } else {
        expand_closure(&request, &dep.index, dep.tau_h, dep.tau_sim)?
    };
    let key = dep.wal_key.as_deref();
    let infl = influence_steps(&dep.wal, &dep.id_manifest, &closure, key)?;
    let limit = from.or(infl.first().copied()).unwrap_or(dep.cfg.total_steps);
    let (_, ckpt) = dep
        .checkpoints
        .range(..=limit)
        .next_back()
        .ok_or_else(|| fail(EXIT_PRECONDITION, format!("no checkpoint at or before step {limit}")))?;
    if from.is_some() && infl.first().is_some_and(|f| *f < ckpt.meta.logical_step) {
        return Err(fail(EXIT_PRECONDITION, "checkpoint postdates an influenced step"));
    }
    let inp = ReplayInputs {
        ckpt,
        wal: &dep.wal,
        manifest: &dep.id_manifest,
        closure: &closure,
        corpus: &dep.corpus,
        cfg: &dep.cfg,
        key,
    };
    let rep = replay_filter(&inp, ReplayOptions::default())?;
    let ora = oracle_retain_train(&inp, false)?;
    let proof = prove_equality(&ora, &rep, &dep.wal.digest())?;
    let path = put_report(ws, "equality-proof", "json", proof.to_json()?.as_bytes())?;
    print_json(&json!({
        "status": proof.status,
        "closure_size": closure.len(),
        "influenced_steps": infl.len(),
        "from_checkpoint": ckpt.meta.logical_step,
        "applied_steps": rep.report.applied_steps,
        "empty_steps": rep.report.empty_logical_steps,
        "model_hash": proof.model_hash_replay,
        "matches_live_state": rep.params.bit_eq(&dep.params) && rep.opt.bit_eq(&dep.opt),
        "proof": path,
    }))?;
    Ok(if proof.passed() { 0 } else { EXIT_INTEGRITY })
}

fn revert(ws: &Workspace, wal_key: Option<Vec<u8>>, u: u32) -> CmdResult {
    let (dep, _) = ws.load(wal_key)?;
    let window = dep.effective_window();
    if u == 0 || u > window {
        return Err(Error::WindowExceeded { requested: u, window }.into());
    }
    let (params, opt) = dep.ring.revert(&dep.params, &dep.opt, u as usize)?;
    let target = dep.current_step - u;
    let saved = dep.checkpoints.get(&target).map(|c| c.params.bit_eq(&params) && c.opt.bit_eq(&opt));
    let mut meta = dep.checkpoints.values().next().expect("step-0 checkpoint").meta.clone();
    meta.logical_step = target;
    let ck = Checkpoint { params, opt, meta };
    let empty = ForgetClosure::empty();
    let forward = replay_filter(
        &ReplayInputs {
            ckpt: &ck,
            wal: &dep.wal,
            manifest: &dep.id_manifest,
            closure: &empty,
            corpus: &dep.corpus,
            cfg: &dep.cfg,
            key: dep.wal_key.as_deref(),
        },
        ReplayOptions::default(),
    )?;
    let restores = forward.params.bit_eq(&dep.params) && forward.opt.bit_eq(&dep.opt);
    let path = put_report(ws, &format!("reverted-{target:06}"), "bin", &ck.to_bytes()?)?;
    print_json(&json!({
        "reverted_to": target,
        "model_hash": hex::encode(model_hash(&ck.params)),
        "equals_saved_checkpoint": saved,
        "forward_replay_restores": restores,
        "state": path,
    }))?;
    Ok(if restores && saved != Some(false) { 0 } else { EXIT_INTEGRITY })
}

fn forget(ws: &Workspace, wal_key: Option<Vec<u8>>, manifest_key: &[u8], req: &ForgetRequest, faults: FaultHooks) -> CmdResult {
    let (dep, pc) = ws.load(wal_key)?;
    let mut c = Controller::new(dep, manifest_key.to_vec());
    c.manifest = ws.load_manifest()?;
    c.faults = faults;
    let seq_before = c.manifest.len();
    let entry = c.execute(req)?;
    ws.save_manifest(&c.manifest)?;
    c.artifacts.write_dir(&ws.reports_dir())?;
    ws.save(&c.dep, &pc)?;
    let new: Vec<_> = c.manifest.entries()?.into_iter().skip(seq_before).collect();
    print_json(&json!({
        "request_id": req.request_id.to_string(),
        "path": entry.path_taken,
        "outcome": entry.outcome,
        "servable": entry.servable,
        "closure_size": entry.closure_size,
        "detail": entry.detail,
        "artifacts": entry.artifacts,
        "entries_appended": new.iter().map(|e| json!({"seq": e.seq, "path": e.path_taken, "outcome": e.outcome, "escalated_from": e.escalated_from})).collect::<Vec<_>>(),
    }))?;
    Ok(match entry.outcome {
        Outcome::Pass | Outcome::NothingToDo => 0,
        Outcome::AuditFail | Outcome::Escalated => EXIT_AUDIT,
        Outcome::Refused if entry.detail.contains("integrity") => EXIT_INTEGRITY,
        Outcome::Refused => EXIT_PRECONDITION,
    })
}

fn audit(ws: &Workspace, wal_key: Option<Vec<u8>>, checkpoint: Option<&Path>) -> CmdResult {
    let (dep, _) = ws.load(wal_key)?;
    let g = ws.load_corpus()?;
    let params = match checkpoint {
        Some(p) => Checkpoint::load(p)?.params,
        None => dep.served()?,
    };
    let inp = AuditInputs::from_generated(&g)?;
    let rep = run_audit_suite(&params, &dep.audit_corpus, &inp, &AuditThresholds::default())?;
    let path = put_report(ws, "audit-report", "json", rep.to_json()?.as_bytes())?;
    for t in &rep.tests {
        let metric = t.metric.map_or("n/a".to_string(), |m| format!("{m:.4}"));
        println!("{:<20} {:<4} {metric:>10}  {}", t.name, if t.pass { "PASS" } else { "FAIL" }, t.detail);
    }
    println!("overall {} ({})", if rep.pass { "PASS" } else { "FAIL" }, path.display());
    Ok(if rep.pass { 0 } else { EXIT_AUDIT })
}

fn verify_wal(ws: &Workspace, wal_key: Option<Vec<u8>>, manifest_key: &[u8]) -> CmdResult {
    let (wal, ids) = ws.load_wal()?;
    let key = wal_key.as_deref();
    let rep = wal.verify(key);
    let id_check = if rep.ok() { wal.verify_manifest(&ids, key).err().map(|e| e.to_string()) } else { None };
    let chain = verify_chain(&ws.load_manifest()?, manifest_key);
    let ok = rep.ok() && id_check.is_none() && chain.is_ok();
    print_json(&json!({
        "records": rep.records,
        "segments": rep.segments,
        "bytes_on_disk": rep.bytes_on_disk,
        "wal_sha256": wal.digest(),
        "wal_failure": rep.first_failure().map(|f| format!("{f:?}")),
        "id_manifest_failure": id_check,
        "manifest_chain": match chain {
            ChainVerdict::Ok { entries } => json!({"ok": true, "entries": entries}),
            ChainVerdict::FirstBad { seq, reason } => json!({"ok": false, "first_bad_seq": seq, "reason": reason}),
        },
    }))?;
    Ok(if ok { 0 } else { EXIT_INTEGRITY })
}
