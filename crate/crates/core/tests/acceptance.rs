//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use unlearn_core::adapters::{train_cohort, AdapterConfig, AdapterRegistry};
use unlearn_core::audits::{
    canary_exposure, mia_auc, overfit_model, retain_ppl, run_audit_suite, targeted_extraction, AuditInputs,
    AuditThresholds,
};
use unlearn_core::budget::{budget_report, BudgetInputs};
use unlearn_core::checkpoint::{model_hash, Checkpoint};
use unlearn_core::closure::{
    expand_closure, hamming, jaccard, shingle_set, simhash64, ForgetClosure, SimHashIndex, DEFAULT_TAU_H,
    DEFAULT_TAU_SIM,
};
use unlearn_core::controller::{
    ci_gate, route, verify_chain, CiFaults, Controller, FaultHooks, ForgetRequest, Outcome, PathTaken,
    PlannedAction, RoutingState, Urgency,
};
use unlearn_core::corpus::{generate, Corpus, CorpusProfile, GeneratedCorpus, Sample, SecretItem};
use unlearn_core::model::{ModelShape, Reduction};
use unlearn_core::optim::TrainConfig;
use unlearn_core::oracle::oracle_retain_train;
use unlearn_core::pipeline::{build_deployment, PipelineConfig};
use unlearn_core::replay::{
    influence_steps, mean_reduction_counterexample, prove_equality, reduction_divergence, replay_filter,
    ReplayInputs, ReplayOptions, ReplayOutcome,
};
use unlearn_core::ring::{ulps_at_scale, Codec, PatchMode, RingBuffer};
use unlearn_core::tokenizer::encode;
use unlearn_core::train::{run_id, CheckpointPolicy, TrainHooks, TrainRun, TrainRunResult};
use unlearn_core::wal::{IdManifest, MemorySink, Wal, WalWriter, RECORD_BYTES};

const KEY: &[u8] = b"deployment-key";
const WINDOW: u32 = 16;

struct Run {
    result: TrainRunResult,
    wal: Wal,
    manifest: IdManifest,
    ring: RingBuffer,
    seconds: f64,
}

fn train_run(corpus: &Corpus, cfg: &TrainConfig, mode: PatchMode) -> Run {
    let t = cfg.total_steps;
    let start = Instant::now();
    let mut w = WalWriter::new(MemorySink::default(), run_id(cfg), Some(KEY.to_vec()));
    let mut ring = RingBuffer::new(WINDOW as usize, mode, Codec::ZeroRle, true);
    let policy = CheckpointPolicy { every: Some(25), at: (t - WINDOW..=t).chain([0]).collect(), dir: None };
    let result = TrainRun { corpus, cfg, wal: &mut w, policy, ring: Some(&mut ring), hooks: TrainHooks::default() }
        .run()
        .unwrap();
    let (sink, manifest) = w.finish().unwrap();
    Run { result, wal: Wal::from(sink), manifest, ring, seconds: start.elapsed().as_secs_f64() }
}

struct Ctx {
    g: GeneratedCorpus,
    cfg: TrainConfig,
    run: Run,
    closure: ForgetClosure,
}

impl Ctx {
    fn inputs<'a>(&'a self, ckpt: &'a Checkpoint, closure: &'a ForgetClosure) -> ReplayInputs<'a> {
        ReplayInputs {
            ckpt,
            wal: &self.run.wal,
            manifest: &self.run.manifest,
            closure,
            corpus: &self.g.base,
            cfg: &self.cfg,
            key: Some(KEY),
        }
    }

    /// Greatest checkpoint at or before the first influenced step.
    fn preceding_checkpoint(&self, closure: &ForgetClosure) -> &Checkpoint {
        let infl = influence_steps(&self.run.wal, &self.run.manifest, closure, Some(KEY)).unwrap();
        let first = infl.first().copied().unwrap_or(self.cfg.total_steps);
        self.run.result.checkpoints.range(..=first).next_back().unwrap().1
    }
}

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn c1_g1(ctx: &Ctx, cache: &mut Option<(ReplayOutcome, ReplayOutcome)>) -> Verdict {
    let start = Instant::now();
    let ckpt = ctx.preceding_checkpoint(&ctx.closure);
    let inp = ctx.inputs(ckpt, &ctx.closure);
    let rep = replay_filter(&inp, ReplayOptions::default()).map_err(|e| e.to_string())?;
    let ora = oracle_retain_train(&inp, false).map_err(|e| e.to_string())?;
    let proof = prove_equality(&ora, &rep, &ctx.run.wal.digest()).map_err(|e| e.to_string())?;
    let flags = proof.component_equality;
    let total = ctx.run.seconds + start.elapsed().as_secs_f64();
    let ok = proof.passed()
        && proof.model_hash_oracle == proof.model_hash_replay
        && proof.opt_hash_oracle == proof.opt_hash_replay
        && flags.params
        && flags.exp_avg
        && flags.exp_avg_sq
        && flags.step
        && total < 120.0;
    let line = format!(
        "corpus {} / forget {} (closure {}), checkpoint {}, status {:?}, model {}..., train+replay+oracle {:.1}s",
        ctx.g.base.len(),
        ctx.g.split.forget_cohort.len(),
        ctx.closure.len(),
        ckpt.meta.logical_step,
        proof.status,
        &proof.model_hash_replay[..12],
        total
    );
    *cache = Some((rep, ora));
    check(ok, line.clone(), line)
}

fn c2_ci_gate(ctx: &Ctx) -> Verdict {
    let clean = ci_gate(&ctx.g.base, &ctx.cfg, Some(KEY), CiFaults::default()).map_err(|e| e.to_string())?;
    let fault = ci_gate(&ctx.g.base, &ctx.cfg, Some(KEY), CiFaults { nondeterminism: true, ..CiFaults::default() })
        .map_err(|e| e.to_string())?;
    let trunc = ci_gate(&ctx.g.base, &ctx.cfg, Some(KEY), CiFaults { truncate_last_record: true, ..CiFaults::default() })
        .map_err(|e| e.to_string())?;
    let line = format!(
        "clean exit {}, fault stub fails stage {:?}, truncated WAL fails stage {:?}",
        clean.exit_code(),
        fault.failed_stage,
        trunc.failed_stage
    );
    check(
        clean.exit_code() == 0 && clean.stages.len() == 3 && fault.failed_stage == Some(1) && trunc.failed_stage == Some(3),
        line.clone(),
        line,
    )
}

fn c3_wal(ctx: &Ctx) -> Verdict {
    let recs = ctx.run.wal.records(Some(KEY)).map_err(|e| e.to_string())?.len();
    let bytes = ctx.run.wal.record_bytes();
    let line = format!("{RECORD_BYTES} B x {recs} records = {bytes} B payload");
    check(RECORD_BYTES == 32 && recs == 400 && bytes == 12_800, line.clone(), line)
}

fn c4_revert(ctx: &Ctx) -> Verdict {
    let r = &ctx.run;
    let t = ctx.cfg.total_steps;
    let mut notes = Vec::new();
    let mut ok = r.ring.len() == WINDOW as usize;
    for u in [1u32, 8, 16] {
        let (p, o) = r.ring.revert(&r.result.params, &r.result.opt, u as usize).map_err(|e| e.to_string())?;
        let saved = &r.result.checkpoints[&(t - u)];
        let eq = p.bit_eq(&saved.params) && o.bit_eq(&saved.opt);
        let ck = Checkpoint { params: p, opt: o, meta: saved.meta.clone() };
        let empty = ForgetClosure::empty();
        let back = replay_filter(&ctx.inputs(&ck, &empty), ReplayOptions::default()).map_err(|e| e.to_string())?;
        let restored = back.params.bit_eq(&r.result.params) && back.opt.bit_eq(&r.result.opt);
        ok &= eq && restored;
        notes.push(format!("u={u} xor {} replay {}", eq, restored));
    }
    let arith = train_run(&ctx.g.base, &ctx.cfg, PatchMode::Arith);
    let mut worst = 0.0f64;
    for u in [1u32, 8, 16] {
        let (p, _) = arith.ring.revert(&arith.result.params, &arith.result.opt, u as usize).map_err(|e| e.to_string())?;
        let span: Vec<Vec<f32>> = (t - u..=t).map(|s| arith.result.checkpoints[&s].params.flatten()).collect();
        let saved = arith.result.checkpoints[&(t - u)].params.flatten();
        for (i, (a, b)) in p.flatten().iter().zip(&saved).enumerate() {
            let scale = span.iter().map(|v| v[i].abs()).fold(0.0f32, f32::max);
            let d = ulps_at_scale(*a, *b, scale);
            worst = worst.max(d / u as f64);
            ok &= d <= u as f64;
        }
    }
    let line = format!("{}; arith worst error {:.3} x u ulps", notes.join(", "), worst);
    check(ok, line.clone(), line)
}

fn c5_budget() -> Verdict {
    let big = budget_report(&BudgetInputs::default()).map_err(|e| e.to_string())?;
    let full = big.row("full_checkpoint").unwrap();
    let gb = full.bytes.unwrap() as f64 / 1e9;
    let toy = budget_report(&BudgetInputs { per_step_bytes: Some(406_456), ..BudgetInputs::default() })
        .map_err(|e| e.to_string())?;
    let stored = toy.row("ring_stored").unwrap().bytes.unwrap();
    let line = format!("full checkpoint {gb:.2} GB ({}), ring stored {stored} B", full.display);
    check((gb - 13.0).abs() / 13.0 <= 0.01 && stored.abs_diff(4_552_307) <= 1, line.clone(), line)
}

fn c6_adapter(ctx: &Ctx) -> Verdict {
    let base = &ctx.run.result.params;
    let base_hash = model_hash(base);
    let mut reg = AdapterRegistry::new(base);
    let cfg = AdapterConfig::default();
    let cohorts = &ctx.g.split.cohorts;
    let sub = |ids: &Vec<u64>| ctx.g.cohorts.subset(&ids.iter().copied().collect()).unwrap();
    for (id, ids) in &cohorts[..cohorts.len() - 1] {
        reg.register(train_cohort(base, &sub(ids), *id, &cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    }
    let pre = reg.serve(base).map_err(|e| e.to_string())?;
    let (last, ids) = cohorts.last().unwrap();
    let adapter = train_cohort(base, &sub(ids), *last, &cfg).map_err(|e| e.to_string())?;
    let frozen = model_hash(base) == base_hash;
    reg.register(adapter).map_err(|e| e.to_string())?;
    let with = reg.serve(base).map_err(|e| e.to_string())?;
    reg.delete(*last).map_err(|e| e.to_string())?;
    let after = reg.serve(base).map_err(|e| e.to_string())?;
    let line = format!(
        "base frozen {frozen}, adapter changed served weights {}, deletion restores pre-cohort bytes {}",
        !with.bit_eq(&pre),
        after.bit_eq(&pre)
    );
    check(frozen && !with.bit_eq(&pre) && after.bit_eq(&pre), line.clone(), line)
}

fn c7_sum_necessity(ctx: &Ctx) -> Verdict {
    let steps = 40;
    let mean_cfg = TrainConfig { reduction: Reduction::Mean, total_steps: steps, ..ctx.cfg.clone() };
    let sum_cfg = TrainConfig { total_steps: steps, ..ctx.cfg.clone() };
    let mut out = Vec::new();
    for c in [&mean_cfg, &sum_cfg] {
        let mut w = WalWriter::new(MemorySink::default(), run_id(c), Some(KEY.to_vec()));
        let r = TrainRun {
            corpus: &ctx.g.base,
            cfg: c,
            wal: &mut w,
            policy: CheckpointPolicy::at([0]),
            ring: None,
            hooks: TrainHooks::default(),
        }
        .run()
        .map_err(|e| e.to_string())?;
        let (sink, manifest) = w.finish().map_err(|e| e.to_string())?;
        let wal = Wal::from(sink);
        let inp = ReplayInputs {
            ckpt: &r.checkpoints[&0],
            wal: &wal,
            manifest: &manifest,
            closure: &ctx.closure,
            corpus: &ctx.g.base,
            cfg: c,
            key: Some(KEY),
        };
        let d = if c.reduction == Reduction::Mean {
            mean_reduction_counterexample(&inp)
        } else {
            reduction_divergence(&inp)
        }
        .map_err(|e| e.to_string())?;
        out.push(d.max_abs_diff);
    }
    let line = format!("mean max|diff| {:e}, sum max|diff| {:e}", out[0], out[1]);
    check(out[0] > 0.0 && out[1] == 0.0, line.clone(), line)
}

fn c8_empty_skip(ctx: &Ctx) -> Verdict {
    let step = 120u32;
    let ids: BTreeSet<u64> = ctx
        .run
        .wal
        .records(Some(KEY))
        .map_err(|e| e.to_string())?
        .iter()
        .filter(|r| r.opt_step_u32 == step)
        .flat_map(|r| ctx.run.manifest.resolve(r, Some(KEY)).unwrap().to_vec())
        .collect();
    let closure = ctx.closure.union(&ForgetClosure::exact(ids));
    let ckpt = ctx.preceding_checkpoint(&closure);
    let inp = ctx.inputs(ckpt, &closure);
    let rep = replay_filter(&inp, ReplayOptions::default()).map_err(|e| e.to_string())?;
    let ora = oracle_retain_train(&inp, false).map_err(|e| e.to_string())?;
    let equal = prove_equality(&ora, &rep, "").map_err(|e| e.to_string())?.passed();
    let no_skip = replay_filter(&inp, ReplayOptions { skip_empty_steps: false, ..ReplayOptions::default() })
        .map_err(|e| e.to_string())?;
    let broken = !prove_equality(&ora, &no_skip, "").map_err(|e| e.to_string())?.passed();
    let line = format!(
        "skipped {} empty steps, opt.step replay {} oracle {}, equal {equal}, without skip diverges {broken}",
        rep.report.empty_logical_steps, rep.opt.step, ora.opt.step
    );
    check(rep.report.empty_logical_steps >= 1 && rep.opt.step == ora.opt.step && equal && broken, line.clone(), line)
}

fn c9_audits(ctx: &Ctx, pair: &(ReplayOutcome, ReplayOutcome)) -> Verdict {
    let (rep, ora) = pair;
    let inp = AuditInputs::from_generated(&ctx.g).map_err(|e| e.to_string())?;
    let all = Corpus::union([&ctx.g.base, &ctx.g.controls]).map_err(|e| e.to_string())?;
    let auc_r = mia_auc(&rep.params, &all, &inp.forget, &inp.controls, 1).map_err(|e| e.to_string())?;
    let auc_o = mia_auc(&ora.params, &all, &inp.forget, &inp.controls, 1).map_err(|e| e.to_string())?;
    let ppl_r = retain_ppl(&rep.params, &all, &inp.retain_eval).map_err(|e| e.to_string())?;
    let ppl_o = retain_ppl(&ora.params, &all, &inp.retain_eval).map_err(|e| e.to_string())?;
    let ex_r = targeted_extraction(&rep.params, &inp.extraction).map_err(|e| e.to_string())?;
    let ex_o = targeted_extraction(&ora.params, &inp.extraction).map_err(|e| e.to_string())?;
    let d_auc = (auc_r.auc - auc_o.auc).abs();
    let gap = (ppl_r - ppl_o).abs() / ppl_o * 100.0;
    // Honest full-suite result on the replayed model, reported, not gated.
    let full = run_audit_suite(&rep.params, &all, &inp, &AuditThresholds::default()).map_err(|e| e.to_string())?;
    let failing: Vec<&str> = full.tests.iter().filter(|t| !t.pass).map(|t| t.name.as_str()).collect();
    let exposures: Vec<String> = full.exposures.iter().map(|e| format!("{:.2}", e.exposure)).collect();

    // Positive control: one canary document fitted hard.
    let canary = &ctx.g.split.canaries[0];
    let doc = Corpus::new(vec![Sample { id: 1, text: canary.text() }]).unwrap();
    let fit = overfit_model(&doc, &[1], ModelShape::default(), 300, 1e-2, 3).map_err(|e| e.to_string())?;
    let pos_ex = targeted_extraction(
        &fit,
        &[SecretItem {
            sample_id: 1,
            prefix: canary.prefix.clone(),
            suffix: unlearn_core::corpus::Canary::render_fill(canary.fill, canary.bits),
        }],
    )
    .map_err(|e| e.to_string())?;
    let pos_exp = canary_exposure(&fit, canary).map_err(|e| e.to_string())?;
    let line = format!(
        "dAUC {d_auc:.4} (replay {:.3} ci [{:.3}, {:.3}]), PPL gap {gap:.5}% ({ppl_r:.3}), extraction {ex_r}/{ex_o}; \
         control extraction {pos_ex}, exposure {:.2}/{} bits; default suite {} (failing: {:?}, exposures [{}])",
        auc_r.auc,
        auc_r.ci.0,
        auc_r.ci.1,
        pos_exp.exposure,
        canary.bits,
        if full.pass { "PASS" } else { "FAIL" },
        failing,
        exposures.join(", ")
    );
    check(
        d_auc <= 0.05 && gap <= 0.1 && ex_r == 0.0 && ex_o == 0.0 && pos_ex == 1.0 && pos_exp.exposure >= canary.bits as f64 - 0.5,
        line.clone(),
        line,
    )
}

fn single_edits(text: &str) -> impl Iterator<Item = String> + '_ {
    (0..text.len()).flat_map(move |i| {
        (b'a'..=b'z').filter_map(move |r| {
            let mut b = text.as_bytes().to_vec();
            (b[i] != r && b[i] != b' ').then(|| {
                b[i] = r;
                String::from_utf8(b).unwrap()
            })
        })
    })
}

fn admitted(x: &str, y: &str) -> bool {
    let (a, b) = (encode(x), encode(y));
    hamming(simhash64(&a).unwrap(), simhash64(&b).unwrap()) <= DEFAULT_TAU_H
        && jaccard(&shingle_set(&a), &shingle_set(&b)) >= DEFAULT_TAU_SIM
}

fn c10_closure() -> Verdict {
    let a = "tiva romu kesa bilo dune praso vetika muno".to_string();
    let (b, c) = single_edits(&a)
        .filter(|b| admitted(&a, b))
        .find_map(|b| {
            let c = single_edits(&b).find(|c| *c != a && admitted(&b, c) && !admitted(&a, c))?;
            Some((b, c))
        })
        .ok_or("no chain found")?;
    let mut samples = vec![
        Sample { id: 1, text: a },
        Sample { id: 2, text: b },
        Sample { id: 3, text: c },
    ];
    samples.push(Sample { id: 4, text: "unrelated filler text here".into() });
    let small = SimHashIndex::build(&Corpus::new(samples).unwrap()).map_err(|e| e.to_string())?;
    let cl = expand_closure(&[1].into(), &small, DEFAULT_TAU_H, DEFAULT_TAU_SIM).map_err(|e| e.to_string())?;
    let chain_ok = cl.expanded == [1, 2, 3].into() && small.similar(1, 3, DEFAULT_TAU_H, DEFAULT_TAU_SIM).is_none();

    let big = generate(&CorpusProfile { size: 10_000, forget_size: 100, ..CorpusProfile::default() }).map_err(|e| e.to_string())?;
    let idx = SimHashIndex::build(&big.base).map_err(|e| e.to_string())?;
    let brute: Vec<(u64, u64)> = idx.all_pairs(DEFAULT_TAU_H, DEFAULT_TAU_SIM);
    let missed = brute.iter().filter(|(x, y)| !idx.candidates(*x).contains(y)).count();
    let line = format!(
        "chain closure {:?}, 10k docs: {} admitted pairs, {missed} missed by the index",
        cl.expanded,
        brute.len()
    );
    check(chain_ok && missed == 0 && !brute.is_empty() && big.base.len() == 10_000, line.clone(), line)
}

fn c11_controller(ctx: &Ctx) -> Verdict {
    // Routing table over (confinement x window hit x urgency).
    let cohort: BTreeSet<u64> = [7_000_001u64].into();
    let mut table_ok = true;
    let mut rows = Vec::new();
    for confined in [true, false] {
        for hit in [true, false] {
            for urgency in [Urgency::Normal, Urgency::Urgent] {
                let influence: BTreeSet<u32> = if confined { BTreeSet::new() } else if hit { [195].into() } else { [90].into() };
                let s = RoutingState {
                    window: WINDOW,
                    checkpoints: [0, 25, 50, 75, 100, 125, 150, 175].into(),
                    cohorts: BTreeMap::from([(3, cohort.clone())]),
                    current_step: 200,
                    influence,
                };
                let ids = if confined { cohort.clone() } else { [42u64].into() };
                let got = route(&ids, urgency, &s).map_err(|e| e.to_string())?;
                let want = if confined {
                    PlannedAction::AdapterDelete { cohorts: vec![3] }
                } else if hit {
                    PlannedAction::RecentRevert { u: 5 }
                } else if urgency == Urgency::Urgent {
                    PlannedAction::HotPath
                } else {
                    PlannedAction::ExactReplay { from_step: 75 }
                };
                table_ok &= got == want;
                rows.push(got.path().map_or("NONE".into(), |p| format!("{p:?}")));
            }
        }
    }

    // Injected hot-path audit failure on the full deployment.
    let (dep, _) = build_deployment(&ctx.g, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let mut c = Controller::new(dep, b"manifest-key".to_vec());
    c.clock = || 1_700_000_000;
    c.faults = FaultHooks { fail_hot_path_audit: true, ..FaultHooks::default() };
    // A forget-set sample whose influence lies wholly before the ring window.
    let req = ctx
        .g
        .split
        .forget_request
        .iter()
        .map(|&id| ForgetRequest { request_id: 77, ids: [id].into(), urgency: Urgency::Urgent, submitted_at: 1 })
        .find(|r| matches!(c.plan(r), Ok((_, PlannedAction::HotPath))))
        .ok_or("no forget sample routes to the hot path")?;
    let last = c.execute(&req).map_err(|e| e.to_string())?;
    let entries = c.manifest.entries().map_err(|e| e.to_string())?;
    let linked = entries.len() == 2
        && entries[0].path_taken == Some(PathTaken::HotPath)
        && entries[0].outcome != Outcome::Pass
        && !entries[0].servable
        && last.path_taken == Some(PathTaken::ExactReplay)
        && last.escalated_from == Some(entries[0].seq);
    let proof_ok = last.artifacts.contains_key("equality_proof");

    let key = b"manifest-key";
    let mut tamper_ok = verify_chain(&c.manifest, key).is_ok();
    for pos in 0..c.manifest.bytes.len() {
        let mut t = c.manifest.clone();
        t.bytes[pos] ^= 0x04;
        tamper_ok &= !verify_chain(&t, key).is_ok();
    }
    let line = format!(
        "routing {} ({}), escalation linked {linked} (final {:?}: {}), every single-byte tamper detected {tamper_ok}",
        if table_ok { "8/8" } else { "mismatch" },
        rows.join(" "),
        last.outcome,
        last.detail
    );
    check(table_ok && linked && proof_ok && tamper_ok, line.clone(), line)
}

fn main() {
    let setup = Instant::now();
    let g = generate(&CorpusProfile::default()).expect("corpus");
    let cfg = TrainConfig::default();
    let run = train_run(&g.base, &cfg, PatchMode::Xor);
    let index = SimHashIndex::build(&g.base).expect("index");
    let request: BTreeSet<u64> = g.split.forget_request.iter().copied().collect();
    let closure = expand_closure(&request, &index, DEFAULT_TAU_H, DEFAULT_TAU_SIM).expect("closure");
    let ctx = Ctx { g, cfg, run, closure };
    println!("setup: default corpus and 200-step run in {:.1}s", setup.elapsed().as_secs_f64());

    let mut pair = None;
    let mut failures = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match v {
            Ok(msg) => println!("criterion {n:>2} PASS [{name}] {msg} ({secs:.1}s)"),
            Err(msg) => {
                failures += 1;
                println!("criterion {n:>2} FAIL [{name}] {msg} ({secs:.1}s)");
            }
        }
    };
    report(1, "G1 bit-exact replay", &mut || c1_g1(&ctx, &mut pair));
    report(2, "CI gate", &mut || c2_ci_gate(&ctx));
    report(3, "WAL footprint", &mut || c3_wal(&ctx));
    report(4, "G3 ring revert", &mut || c4_revert(&ctx));
    report(5, "budget rows", &mut c5_budget);
    report(6, "G2 adapter deletion", &mut || c6_adapter(&ctx));
    report(7, "sum necessity", &mut || c7_sum_necessity(&ctx));
    report(8, "empty-step skip", &mut || c8_empty_skip(&ctx));
    report(9, "audit parity", &mut || match &pair {
        Some(p) => c9_audits(&ctx, p),
        None => Err("criterion 1 produced no replay/oracle pair".into()),
    });
    report(10, "closure fixed point", &mut c10_closure);
    report(11, "controller routing and manifest", &mut || c11_controller(&ctx));
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
