//! Request routing, path execution, and the hash-chained forget manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audits::{closure_items, run_audit_suite, variant_items, AuditInputs, AuditReport, AuditThresholds};
use crate::checkpoint::{model_hash, state_hash, Checkpoint, CheckpointMeta};
use crate::closure::{expand_closure, ForgetClosure};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::hotpath::{estimate_fisher_diag, hot_path_unlearn, HotPathConfig, ModelObjective};
use crate::model::ModelParams;
use crate::optim::TrainConfig;
use crate::oracle::oracle_retain_train;
use crate::pipeline::Deployment;
use crate::replay::{influence_steps, prove_equality, replay_filter, EqualityProof, ReplayInputs, ReplayOptions};
use crate::train::{run_id, CheckpointPolicy, TrainHooks, TrainRun};
use crate::wal::{hmac_sha256, MemorySink, Wal, WalWriter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Urgency {
    Urgent,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetRequest {
    pub request_id: u128,
    pub ids: BTreeSet<u64>,
    pub urgency: Urgency,
    /// Unix seconds.
    pub submitted_at: u64,
}

impl ForgetRequest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PathTaken {
    AdapterDelete,
    RecentRevert,
    HotPath,
    ExactReplay,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannedAction {
    /// Closure empty after expansion and dedup against earlier requests.
    Nothing,
    AdapterDelete { cohorts: Vec<u32> },
    RecentRevert { u: u32 },
    HotPath,
    ExactReplay { from_step: u32 },
}

impl PlannedAction {
    pub fn path(&self) -> Option<PathTaken> {
        match self {
            Self::Nothing => None,
            Self::AdapterDelete { .. } => Some(PathTaken::AdapterDelete),
            Self::RecentRevert { .. } => Some(PathTaken::RecentRevert),
            Self::HotPath => Some(PathTaken::HotPath),
            Self::ExactReplay { .. } => Some(PathTaken::ExactReplay),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    /// Revertible ring window N.
    pub window: u32,
    pub checkpoints: BTreeSet<u32>,
    /// Active cohort id -> member ids.
    pub cohorts: BTreeMap<u32, BTreeSet<u64>>,
    /// Current logical step T.
    pub current_step: u32,
    /// Steps whose microbatches intersect the closure.
    pub influence: BTreeSet<u32>,
}

/// Cheapest applicable path, in strict priority order.
pub fn route(closure_ids: &BTreeSet<u64>, urgency: Urgency, s: &RoutingState) -> Result<PlannedAction> {
    if closure_ids.is_empty() {
        return Ok(PlannedAction::Nothing);
    }
    let owning: Vec<u32> = s
        .cohorts
        .iter()
        .filter(|(_, m)| closure_ids.iter().any(|id| m.contains(id)))
        .map(|(c, _)| *c)
        .collect();
    let in_cohorts = |id: &u64| s.cohorts.values().any(|m| m.contains(id));
    if !owning.is_empty() {
        if closure_ids.iter().all(in_cohorts) && s.influence.is_empty() {
            return Ok(PlannedAction::AdapterDelete { cohorts: owning });
        }
        return Err(Error::Precondition(
            "request mixes cohort-confined and base samples; submit them separately".into(),
        ));
    }
    let (Some(&lo), Some(&hi)) = (s.influence.first(), s.influence.last()) else {
        return Ok(PlannedAction::Nothing);
    };
    let edge = s.current_step.saturating_sub(s.window);
    let in_window = s.window > 0 && hi >= edge;
    if in_window && lo >= edge {
        return Ok(PlannedAction::RecentRevert { u: s.current_step - lo });
    }
    // Influence straddling the window edge goes to exact replay, never a
    // partial revert or the approximate path.
    if urgency == Urgency::Urgent && !in_window {
        return Ok(PlannedAction::HotPath);
    }
    match s.checkpoints.range(..=lo).next_back() {
        Some(&k) => Ok(PlannedAction::ExactReplay { from_step: k }),
        None => Err(Error::Precondition(format!("no checkpoint at or before step {lo}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Pass,
    AuditFail,
    Escalated,
    Refused,
    NothingToDo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seq: u64,
    pub prev_entry_hash: String,
    pub request: ForgetRequest,
    pub closure_digest: String,
    pub closure_size: usize,
    pub path_taken: Option<PathTaken>,
    /// Artifact name -> SHA-256 hex of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub thresholds: AuditThresholds,
    pub outcome: Outcome,
    pub servable: bool,
    /// Seq of the failed attempt this entry escalates.
    pub escalated_from: Option<u64>,
    pub detail: String,
    pub recorded_at: u64,
    pub hmac_tag: String,
}

impl ManifestEntry {
    fn unsigned_bytes(&self) -> Result<Vec<u8>> {
        let mut e = self.clone();
        e.hmac_tag.clear();
        Ok(serde_json::to_vec(&e)?)
    }

    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    fn sign(&mut self, key: &[u8]) -> Result<()> {
        self.hmac_tag = hex::encode(hmac_sha256(key, &self.unsigned_bytes()?));
        Ok(())
    }
}

/// Length-prefixed canonical entries; each links to the SHA-256 of the
/// previous entry's bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestLog {
    pub bytes: Vec<u8>,
}

pub const GENESIS_HASH: [u8; 32] = [0; 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainVerdict {
    Ok { entries: u64 },
    FirstBad { seq: u64, reason: String },
}

impl ChainVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok { .. })
    }
}

impl ManifestLog {
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read(path) {
            Ok(bytes) => Ok(Self { bytes }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &self.bytes)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn frames(&self) -> Vec<std::result::Result<&[u8], u64>> {
        let mut out = Vec::new();
        let mut at = 0usize;
        let mut seq = 0u64;
        while at < self.bytes.len() {
            if at + 4 > self.bytes.len() {
                out.push(Err(seq));
                break;
            }
            let len = u32::from_le_bytes(self.bytes[at..at + 4].try_into().unwrap()) as usize;
            let end = at + 4 + len;
            if end > self.bytes.len() {
                out.push(Err(seq));
                break;
            }
            out.push(Ok(&self.bytes[at + 4..end]));
            at = end;
            seq += 1;
        }
        out
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>> {
        self.frames()
            .into_iter()
            .map(|f| match f {
                Ok(b) => Ok(serde_json::from_slice(b)?),
                Err(seq) => Err(Error::Integrity(format!("manifest frame {seq} is truncated"))),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.frames().len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn tail_hash(&self) -> Result<([u8; 32], u64)> {
        let frames = self.frames();
        match frames.last() {
            None => Ok((GENESIS_HASH, 0)),
            Some(Ok(b)) => Ok((Sha256::digest(b).into(), frames.len() as u64)),
            Some(Err(seq)) => Err(Error::Integrity(format!("manifest frame {seq} is truncated"))),
        }
    }

    /// Fills `seq`, `prev_entry_hash` and `hmac_tag`, then appends.
    pub fn append(&mut self, mut entry: ManifestEntry, key: &[u8]) -> Result<ManifestEntry> {
        let (prev, seq) = self.tail_hash()?;
        entry.seq = seq;
        entry.prev_entry_hash = hex::encode(prev);
        entry.sign(key)?;
        let bytes = entry.canonical_bytes()?;
        self.bytes.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        self.bytes.extend_from_slice(&bytes);
        Ok(entry)
    }
}

/// Walks the chain checking framing, canonical form, sequence numbers,
/// previous-entry hashes and HMAC tags.
pub fn verify_chain(log: &ManifestLog, key: &[u8]) -> ChainVerdict {
    let mut prev = GENESIS_HASH;
    let frames = log.frames();
    for (i, f) in frames.iter().enumerate() {
        let seq = i as u64;
        let bad = |reason: &str| ChainVerdict::FirstBad { seq, reason: reason.into() };
        let Ok(bytes) = f else {
            return bad("truncated frame");
        };
        let Ok(e) = serde_json::from_slice::<ManifestEntry>(bytes) else {
            return bad("unparseable entry");
        };
        if e.canonical_bytes().ok().as_deref() != Some(*bytes) {
            return bad("non-canonical encoding");
        }
        if e.seq != seq {
            return bad("sequence number out of order");
        }
        if e.prev_entry_hash != hex::encode(prev) {
            return bad("previous-entry hash mismatch");
        }
        match e.unsigned_bytes() {
            Ok(u) if hex::encode(hmac_sha256(key, &u)) == e.hmac_tag => {}
            _ => return bad("hmac tag mismatch"),
        }
        prev = Sha256::digest(bytes).into();
    }
    ChainVerdict::Ok {
        entries: frames.len() as u64,
    }
}

/// Fault injection for the controller.
#[derive(Clone, Copy, Debug, Default)]
pub struct FaultHooks {
    pub fail_hot_path_audit: bool,
    /// Corrupt the replayed state so the equality proof fails.
    pub corrupt_replay: bool,
}

pub type Clock = fn() -> u64;

pub fn system_clock() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Artifacts produced while executing requests, keyed by SHA-256 hex.
#[derive(Clone, Debug, Default)]
pub struct ArtifactStore {
    pub items: BTreeMap<String, (String, Vec<u8>)>,
}

impl ArtifactStore {
    pub fn put(&mut self, name: &str, bytes: Vec<u8>) -> String {
        let digest = hex::encode(Sha256::digest(&bytes));
        self.items.insert(digest.clone(), (name.to_string(), bytes));
        digest
    }

    /// Writes `<name>-<digest prefix>.json` files.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (digest, (name, bytes)) in &self.items {
            let path = dir.join(format!("{name}-{}.json", &digest[..12]));
            fs::write(&path, bytes)?;
            out.push(path);
        }
        Ok(out)
    }
}

pub struct Controller {
    pub dep: Deployment,
    pub manifest: ManifestLog,
    pub manifest_key: Vec<u8>,
    pub thresholds: AuditThresholds,
    pub hot: HotPathConfig,
    pub faults: FaultHooks,
    pub clock: Clock,
    pub artifacts: ArtifactStore,
    /// Checks exact paths against an oracle retrain.
    pub prove: bool,
}

struct Replayed {
    out: crate::replay::ReplayOutcome,
    proof: Option<EqualityProof>,
    proof_digest: String,
    oracle: Option<ModelParams>,
}

type Commit = Box<dyn FnOnce(&mut Deployment)>;

struct Attempt {
    outcome: Outcome,
    servable: bool,
    artifacts: BTreeMap<String, String>,
    detail: String,
    /// State to commit when the attempt succeeds.
    commit: Option<Commit>,
}

impl Attempt {
    fn refused(detail: String) -> Self {
        Self {
            outcome: Outcome::Refused,
            servable: false,
            artifacts: BTreeMap::new(),
            detail,
            commit: None,
        }
    }
}

impl Controller {
    pub fn new(dep: Deployment, manifest_key: Vec<u8>) -> Self {
        Self {
            dep,
            manifest: ManifestLog::default(),
            manifest_key,
            thresholds: AuditThresholds::default(),
            hot: HotPathConfig::default(),
            faults: FaultHooks::default(),
            clock: system_clock,
            artifacts: ArtifactStore::default(),
            prove: true,
        }
    }

    pub fn closure_for(&self, req: &ForgetRequest) -> Result<ForgetClosure> {
        expand_closure(&req.ids, &self.dep.index, self.dep.tau_h, self.dep.tau_sim)
    }

    pub fn routing_state(&self, closure_ids: &BTreeSet<u64>) -> Result<RoutingState> {
        let c = ForgetClosure::exact(closure_ids.iter().copied());
        let key = self.dep.wal_key.as_deref();
        Ok(RoutingState {
            window: self.dep.effective_window(),
            checkpoints: self.dep.checkpoints.keys().copied().collect(),
            cohorts: self.dep.cohorts.clone(),
            current_step: self.dep.current_step,
            influence: influence_steps(&self.dep.wal, &self.dep.id_manifest, &c, key)?,
        })
    }

    /// Ids of a closure not already removed by an earlier request.
    pub fn pending_ids(&self, closure: &ForgetClosure) -> BTreeSet<u64> {
        closure.expanded.difference(&self.dep.forgotten).copied().collect()
    }

    pub fn plan(&self, req: &ForgetRequest) -> Result<(ForgetClosure, PlannedAction)> {
        let closure = self.closure_for(req)?;
        let pending = self.pending_ids(&closure);
        let state = self.routing_state(&pending)?;
        let action = route(&pending, req.urgency, &state)?;
        Ok((closure, action))
    }

    /// Latest entry recorded for `request_id`, if any.
    pub fn find_request(&self, request_id: u128) -> Result<Option<ManifestEntry>> {
        Ok(self.manifest.entries()?.into_iter().rev().find(|e| e.request.request_id == request_id))
    }

    /// Processes a batch: URGENT before NORMAL, FIFO within a class.
    pub fn process_queue(&mut self, mut reqs: Vec<ForgetRequest>) -> Result<Vec<ManifestEntry>> {
        reqs.sort_by_key(|r| r.urgency);
        reqs.iter().map(|r| self.execute(r)).collect()
    }

    /// Routes, runs the path, audits and appends signed entries. Returns the
    /// final entry for the request.
    pub fn execute(&mut self, req: &ForgetRequest) -> Result<ManifestEntry> {
        if let ChainVerdict::FirstBad { seq, reason } = verify_chain(&self.manifest, &self.manifest_key) {
            return Err(Error::Integrity(format!("manifest entry {seq}: {reason}")));
        }
        if let Some(prev) = self.find_request(req.request_id)? {
            return Ok(prev);
        }
        let closure = match self.closure_for(req) {
            Ok(c) => c,
            Err(e @ Error::UnknownIds(_)) => {
                return self.record(req, &ForgetClosure::empty(), None, Attempt::refused(e.to_string()), None);
            }
            Err(e) => return Err(e),
        };
        let pending = self.pending_ids(&closure);
        let wal_report = self.dep.wal.verify(self.dep.wal_key.as_deref());
        if !wal_report.ok() {
            let detail = format!("WAL integrity failure: {:?}", wal_report.first_failure());
            return self.record(req, &closure, Some(PathTaken::ExactReplay), Attempt::refused(detail), None);
        }
        let action = match self.routing_state(&pending).and_then(|s| route(&pending, req.urgency, &s)) {
            Ok(a) => a,
            Err(e @ Error::Precondition(_)) => {
                return self.record(req, &closure, None, Attempt::refused(e.to_string()), None);
            }
            Err(e) => return Err(e),
        };
        match action {
            PlannedAction::Nothing => {
                let a = Attempt {
                    outcome: Outcome::NothingToDo,
                    servable: true,
                    artifacts: BTreeMap::new(),
                    detail: "closure has no pending influence".into(),
                    commit: None,
                };
                self.record(req, &closure, None, a, None)
            }
            PlannedAction::AdapterDelete { cohorts } => {
                let attempt = self.adapter_delete(&pending, &cohorts)?;
                let escalate = attempt.outcome == Outcome::Refused;
                let entry = self.record(req, &closure, Some(PathTaken::AdapterDelete), attempt, None)?;
                if escalate {
                    let a = Attempt::refused(
                        "cohort weights cannot be removed by deletion and the base run holds no influence to replay".into(),
                    );
                    return self.record(req, &closure, Some(PathTaken::ExactReplay), a, Some(entry.seq));
                }
                Ok(entry)
            }
            PlannedAction::RecentRevert { u } => {
                let attempt = self.recent_revert(&pending, u)?;
                self.record(req, &closure, Some(PathTaken::RecentRevert), attempt, None)
            }
            PlannedAction::HotPath => {
                let attempt = self.hot_path(&pending)?;
                if attempt.outcome == Outcome::Pass {
                    return self.record(req, &closure, Some(PathTaken::HotPath), attempt, None);
                }
                let first = self.record(req, &closure, Some(PathTaken::HotPath), attempt, None)?;
                let state = self.routing_state(&pending)?;
                let lo = *state.influence.first().expect("hot path implies influence");
                let from = *state
                    .checkpoints
                    .range(..=lo)
                    .next_back()
                    .ok_or_else(|| Error::Precondition(format!("no checkpoint at or before step {lo}")))?;
                let attempt = self.exact_replay(&pending, from)?;
                self.record(req, &closure, Some(PathTaken::ExactReplay), attempt, Some(first.seq))
            }
            PlannedAction::ExactReplay { from_step } => {
                let attempt = self.exact_replay(&pending, from_step)?;
                self.record(req, &closure, Some(PathTaken::ExactReplay), attempt, None)
            }
        }
    }

    fn record(
        &mut self,
        req: &ForgetRequest,
        closure: &ForgetClosure,
        path: Option<PathTaken>,
        mut attempt: Attempt,
        escalated_from: Option<u64>,
    ) -> Result<ManifestEntry> {
        if attempt.outcome != Outcome::Pass && attempt.outcome != Outcome::NothingToDo {
            attempt.servable = false;
        }
        let entry = ManifestEntry {
            seq: 0,
            prev_entry_hash: String::new(),
            request: req.clone(),
            closure_digest: hex::encode(closure.digest()),
            closure_size: closure.len(),
            path_taken: path,
            artifacts: attempt.artifacts,
            thresholds: self.thresholds.clone(),
            outcome: attempt.outcome,
            servable: attempt.servable,
            escalated_from,
            detail: attempt.detail,
            recorded_at: (self.clock)(),
            hmac_tag: String::new(),
        };
        let entry = self.manifest.append(entry, &self.manifest_key)?;
        if let Some(commit) = attempt.commit {
            commit(&mut self.dep);
        }
        Ok(entry)
    }

    fn audit_inputs(&self, ids: &BTreeSet<u64>, cohort_request: bool, reference_ppl: Option<f64>) -> Result<AuditInputs> {
        let pr = &self.dep.probes;
        let secrets: Vec<_> = pr.secrets.iter().filter(|s| ids.contains(&s.sample_id)).cloned().collect();
        let canaries: Vec<_> = pr.canaries.iter().filter(|c| ids.contains(&c.sample_id)).cloned().collect();
        let all_probes = closure_items(&pr.secrets, &pr.canaries);
        let variants: Vec<_> = pr.variants.iter().filter(|(v, _)| ids.contains(v)).copied().collect();
        let excluded: BTreeSet<u64> = ids.union(&self.dep.forgotten).copied().collect();
        Ok(AuditInputs {
            forget: ids.iter().copied().collect(),
            // Cohort documents have no held-out lookalikes to compare against.
            controls: if cohort_request { Vec::new() } else { pr.controls.clone() },
            canaries: canaries.clone(),
            extraction: closure_items(&secrets, &canaries),
            fuzzy: variant_items(&self.dep.audit_corpus, &variants, &all_probes)?,
            retain_eval: pr.retain_eval.iter().copied().filter(|id| !excluded.contains(id)).collect(),
            reference_ppl,
            seed: 17,
        })
    }

    fn audit(&mut self, served: &ModelParams, inp: &AuditInputs) -> Result<(AuditReport, String)> {
        let report = run_audit_suite(served, &self.dep.audit_corpus, inp, &self.thresholds)?;
        let digest = self.artifacts.put("audit-report", report.to_json()?.into_bytes());
        Ok((report, digest))
    }

    fn reference_ppl(&self, served: &ModelParams, ids: &BTreeSet<u64>) -> Result<Option<f64>> {
        let excluded: BTreeSet<u64> = ids.union(&self.dep.forgotten).copied().collect();
        let eval: Vec<u64> = self.dep.probes.retain_eval.iter().copied().filter(|id| !excluded.contains(id)).collect();
        if eval.is_empty() {
            return Ok(None);
        }
        Ok(Some(crate::audits::retain_ppl(served, &self.dep.audit_corpus, &eval)?))
    }

    fn adapter_delete(&mut self, ids: &BTreeSet<u64>, cohorts: &[u32]) -> Result<Attempt> {
        let before = self.dep.served()?;
        let target = crate::adapters::compose(
            &self.dep.params,
            self.dep.registry.adapters.values().filter(|a| !cohorts.contains(&a.cohort_id)),
        );
        let reference = self.reference_ppl(&target, ids)?;
        let mut registry = self.dep.registry.clone();
        for &c in cohorts {
            match registry.delete(c) {
                Ok(()) => {}
                Err(e @ (Error::MergedAdapter(_) | Error::CompactedAdapter(_))) => {
                    return Ok(Attempt::refused(e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
        let after = registry.serve(&self.dep.params)?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("served_before".into(), hex::encode(model_hash(&before)));
        artifacts.insert("served_after".into(), hex::encode(model_hash(&after)));
        if !after.bit_eq(&target) {
            return Ok(Attempt::refused("served weights after deletion differ from the remaining composition".into()));
        }
        let inp = self.audit_inputs(ids, true, reference)?;
        let (report, digest) = self.audit(&after, &inp)?;
        artifacts.insert("audit_report".into(), digest);
        let pass = report.pass;
        let cohorts = cohorts.to_vec();
        let ids = ids.clone();
        Ok(Attempt {
            outcome: if pass { Outcome::Pass } else { Outcome::AuditFail },
            servable: pass,
            artifacts,
            detail: format!("deleted cohort adapters {cohorts:?}"),
            commit: Some(Box::new(move |d: &mut Deployment| {
                d.registry = registry;
                for c in &cohorts {
                    d.cohorts.remove(c);
                }
                d.forgotten.extend(ids);
            })),
        })
    }

    /// Replays from `ckpt` filtering every removed id, optionally proving
    /// equality against the oracle retrain.
    fn replay_and_prove(&mut self, ckpt: &Checkpoint, ids: &BTreeSet<u64>) -> Result<Replayed> {
        let all: BTreeSet<u64> = ids.union(&self.dep.forgotten).copied().collect();
        let closure = ForgetClosure::exact(all);
        let inp = ReplayInputs {
            ckpt,
            wal: &self.dep.wal,
            manifest: &self.dep.id_manifest,
            closure: &closure,
            corpus: &self.dep.corpus,
            cfg: &self.dep.cfg,
            key: self.dep.wal_key.as_deref(),
        };
        let mut out = replay_filter(&inp, ReplayOptions::default())?;
        if self.faults.corrupt_replay {
            out.params.b2[0] += 1e-3;
        }
        let (proof, oracle) = if self.prove {
            let oracle = oracle_retain_train(&inp, false)?;
            (Some(prove_equality(&oracle, &out, &self.dep.wal.digest())?), Some(oracle.params))
        } else {
            (None, None)
        };
        let proof_digest = match &proof {
            Some(p) => self.artifacts.put("equality-proof", p.to_json()?.into_bytes()),
            None => String::new(),
        };
        Ok(Replayed { out, proof, proof_digest, oracle })
    }

    fn finish_exact(
        &mut self,
        ids: &BTreeSet<u64>,
        r: Replayed,
        mut artifacts: BTreeMap<String, String>,
        keep_checkpoints_through: u32,
        detail: String,
    ) -> Result<Attempt> {
        let Replayed { out, proof, proof_digest, oracle } = r;
        if proof.as_ref().is_some_and(|p| !p.passed()) {
            artifacts.insert("equality_proof".into(), proof_digest);
            return Ok(Attempt {
                outcome: Outcome::Refused,
                servable: false,
                artifacts,
                detail: format!("{detail}; equality proof FAIL, state not committed"),
                commit: None,
            });
        }
        if !proof_digest.is_empty() {
            artifacts.insert("equality_proof".into(), proof_digest);
        }
        let mut registry = self.dep.registry.clone();
        let reference = match &oracle {
            Some(o) => self.reference_ppl(&crate::adapters::compose(o, registry.adapters.values()), ids)?,
            None => None,
        };
        registry.rebase(&out.params);
        let served = registry.serve(&out.params)?;
        let inp = self.audit_inputs(ids, false, reference)?;
        let (report, digest) = self.audit(&served, &inp)?;
        artifacts.insert("audit_report".into(), digest);
        artifacts.insert("state".into(), hex::encode(state_hash(&out.params, &out.opt)));
        let pass = report.pass;
        let ids = ids.clone();
        Ok(Attempt {
            outcome: if pass { Outcome::Pass } else { Outcome::AuditFail },
            servable: pass,
            artifacts,
            detail: if pass { detail } else { format!("{detail}; audit failed: {}", failed_tests(&report)) },
            commit: Some(Box::new(move |d: &mut Deployment| {
                d.params = out.params;
                d.opt = out.opt;
                d.registry = registry;
                d.checkpoints.retain(|&k, _| k <= keep_checkpoints_through);
                d.ring.discard_newest(d.ring.len());
                d.forgotten.extend(ids);
            })),
        })
    }

    fn exact_replay(&mut self, ids: &BTreeSet<u64>, from_step: u32) -> Result<Attempt> {
        let ckpt = self
            .dep
            .checkpoints
            .get(&from_step)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("checkpoint {from_step} missing")))?;
        let r = match self.replay_and_prove(&ckpt, ids) {
            Ok(x) => x,
            Err(e) => return Ok(Attempt::refused(format!("replay refused: {e}"))),
        };
        let detail = format!(
            "replayed {} steps from checkpoint {from_step}, skipped {} empty",
            r.out.report.applied_steps, r.out.report.empty_logical_steps
        );
        self.finish_exact(ids, r, BTreeMap::new(), from_step, detail)
    }

    fn recent_revert(&mut self, ids: &BTreeSet<u64>, u: u32) -> Result<Attempt> {
        let (p, o) = self.dep.ring.revert(&self.dep.params, &self.dep.opt, u as usize)?;
        let mut patch_hash = Sha256::new();
        for patch in self.dep.ring.patches().rev().take(u as usize) {
            patch_hash.update(patch.to_bytes());
        }
        let mut artifacts = BTreeMap::new();
        artifacts.insert("patches".into(), hex::encode(patch_hash.finalize()));
        let from = self.dep.current_step - u;
        let ckpt = Checkpoint {
            params: p,
            opt: o,
            meta: CheckpointMeta {
                shape: self.dep.cfg.shape,
                logical_step: from,
                config_digest: self.dep.cfg.digest(),
                run_id: hex::encode(run_id(&self.dep.cfg)),
            },
        };
        let r = match self.replay_and_prove(&ckpt, ids) {
            Ok(x) => x,
            Err(e) => return Ok(Attempt::refused(format!("replay after revert refused: {e}"))),
        };
        let detail = format!("reverted {u} steps, replayed {} filtered", r.out.report.applied_steps);
        self.finish_exact(ids, r, artifacts, from, detail)
    }

    fn hot_path(&mut self, ids: &BTreeSet<u64>) -> Result<Attempt> {
        let before = self.dep.served()?;
        let reference = self.reference_ppl(&before, ids)?;
        let excluded: BTreeSet<u64> = ids.union(&self.dep.forgotten).copied().collect();
        let retain: Vec<u64> = self.dep.probes.retain_eval.iter().copied().filter(|id| !excluded.contains(id)).collect();
        let obj = ModelObjective {
            corpus: &self.dep.corpus,
            shape: self.dep.cfg.shape,
            forget: ids.iter().copied().collect(),
            retain: retain.clone(),
        };
        let fisher = estimate_fisher_diag(&self.dep.params, &self.dep.corpus, &retain, None)?;
        let (p, o, mut rep) = hot_path_unlearn(&self.dep.params, &self.dep.opt, &obj, &fisher, &self.hot, &retain)?;
        let mut artifacts = BTreeMap::new();
        if !rep.feasible {
            artifacts.insert("hot_path_report".into(), self.artifacts.put("hot-path-report", serde_json::to_vec_pretty(&rep)?));
            return Ok(Attempt {
                outcome: Outcome::Escalated,
                servable: false,
                artifacts,
                detail: format!("hot path infeasible: {}", rep.failure.unwrap_or_default()),
                commit: None,
            });
        }
        let mut registry = self.dep.registry.clone();
        registry.rebase(&p);
        let served = registry.serve(&p)?;
        let inp = self.audit_inputs(ids, false, reference)?;
        let (mut report, _) = self.audit(&served, &inp)?;
        if self.faults.fail_hot_path_audit {
            report = AuditReport::assemble(
                report.model_id.clone(),
                report
                    .tests
                    .into_iter()
                    .map(|mut t| {
                        if t.name == "mia_auc" {
                            t.pass = false;
                            t.detail.push_str("; failure injected");
                        }
                        t
                    })
                    .collect(),
                report.thresholds.clone(),
            );
        }
        artifacts.insert("audit_report".into(), self.artifacts.put("audit-report", report.to_json()?.into_bytes()));
        rep.servable = report.pass;
        artifacts.insert("hot_path_report".into(), self.artifacts.put("hot-path-report", serde_json::to_vec_pretty(&rep)?));
        if !report.pass {
            return Ok(Attempt {
                outcome: Outcome::Escalated,
                servable: false,
                artifacts,
                detail: format!("hot path audit failed: {}", failed_tests(&report)),
                commit: None,
            });
        }
        let ids = ids.clone();
        Ok(Attempt {
            outcome: Outcome::Pass,
            servable: true,
            artifacts,
            detail: format!("{} anti-update steps; approximate until exact replay", rep.steps.len()),
            commit: Some(Box::new(move |d: &mut Deployment| {
                d.params = p;
                d.opt = o;
                d.registry = registry;
                d.ring.discard_newest(d.ring.len());
                d.forgotten.extend(ids);
            })),
        })
    }
}

fn failed_tests(r: &AuditReport) -> String {
    r.tests.iter().filter(|t| !t.pass).map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CiFaults {
    pub nondeterminism: bool,
    pub truncate_last_record: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiStage {
    pub stage: u8,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiGateReport {
    pub stages: Vec<CiStage>,
    pub failed_stage: Option<u8>,
}

impl CiGateReport {
    pub fn exit_code(&self) -> i32 {
        if self.failed_stage.is_some() {
            2
        } else {
            0
        }
    }
}

/// Train twice and compare, replay unfiltered from a mid-run checkpoint and
/// compare, then scan the WAL. Stops at the first failing stage.
pub fn ci_gate(corpus: &Corpus, cfg: &TrainConfig, key: Option<&[u8]>, faults: CiFaults) -> Result<CiGateReport> {
    let mut cfg = cfg.clone();
    cfg.total_steps = 100;
    cfg.warmup_steps = cfg.warmup_steps.min(cfg.total_steps);
    let mid = cfg.total_steps / 2;
    let hooks = TrainHooks {
        nondeterminism: faults.nondeterminism,
    };
    let run = |hooks: TrainHooks| -> Result<(crate::train::TrainRunResult, Wal, crate::wal::IdManifest)> {
        let mut w = WalWriter::new(MemorySink::default(), run_id(&cfg), key.map(<[u8]>::to_vec));
        let r = TrainRun {
            corpus,
            cfg: &cfg,
            wal: &mut w,
            policy: CheckpointPolicy::at([mid]),
            ring: None,
            hooks,
        }
        .run()?;
        let (sink, m) = w.finish()?;
        Ok((r, Wal::from(sink), m))
    };
    let mut stages = Vec::new();
    let fail = |stages: Vec<CiStage>, s: u8| Ok(CiGateReport { stages, failed_stage: Some(s) });

    let (a, wal, manifest) = run(hooks)?;
    let (b, _, _) = run(hooks)?;
    let ha = state_hash(&a.params, &a.opt);
    let hb = state_hash(&b.params, &b.opt);
    let ok1 = ha == hb;
    stages.push(CiStage {
        stage: 1,
        name: "train twice".into(),
        pass: ok1,
        detail: format!("{} vs {}", hex::encode(ha), hex::encode(hb)),
    });
    if !ok1 {
        return fail(stages, 1);
    }

    let ckpt = a.checkpoints.get(&mid).cloned().ok_or_else(|| Error::Precondition("mid-run checkpoint missing".into()))?;
    let empty = ForgetClosure::empty();
    let inp = ReplayInputs {
        ckpt: &ckpt,
        wal: &wal,
        manifest: &manifest,
        closure: &empty,
        corpus,
        cfg: &cfg,
        key,
    };
    let ok2 = match replay_filter(&inp, ReplayOptions::default()) {
        Ok(out) => {
            let hr = state_hash(&out.params, &out.opt);
            let pass = hr == ha;
            stages.push(CiStage {
                stage: 2,
                name: "checkpoint replay".into(),
                pass,
                detail: format!("replay {} vs direct {}", hex::encode(hr), hex::encode(ha)),
            });
            pass
        }
        Err(e) => {
            stages.push(CiStage {
                stage: 2,
                name: "checkpoint replay".into(),
                pass: false,
                detail: e.to_string(),
            });
            false
        }
    };
    if !ok2 {
        return fail(stages, 2);
    }

    let mut scanned = wal;
    if faults.truncate_last_record {
        let len = scanned.record_bytes();
        scanned.truncate_bytes(len - crate::wal::RECORD_BYTES as u64);
    }
    let rep = scanned.verify(key);
    let ok3 = rep.ok() && scanned.verify_manifest(&manifest, key).is_ok();
    stages.push(CiStage {
        stage: 3,
        name: "wal integrity".into(),
        pass: ok3,
        detail: match rep.first_failure() {
            Some(f) => format!("{f:?}"),
            None => format!("{} records in {} segments", rep.records, rep.segments),
        },
    });
    if !ok3 {
        return fail(stages, 3);
    }
    Ok(CiGateReport { stages, failed_stage: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(window: u32, t: u32, influence: &[u32]) -> RoutingState {
        let mut cohorts = BTreeMap::new();
        cohorts.insert(3, [700_000u64, 700_001].into_iter().collect());
        RoutingState {
            window,
            checkpoints: [0u32, 25, 50, 75, 100, 125, 150, 175].into_iter().collect(),
            cohorts,
            current_step: t,
            influence: influence.iter().copied().collect(),
        }
    }

    fn ids(v: &[u64]) -> BTreeSet<u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn routing_examples() {
        let s = state(16, 200, &[]);
        assert_eq!(route(&ids(&[700_000]), Urgency::Normal, &s).unwrap(), PlannedAction::AdapterDelete { cohorts: vec![3] });
        let s = state(16, 200, &[198]);
        assert_eq!(route(&ids(&[5]), Urgency::Normal, &s).unwrap(), PlannedAction::RecentRevert { u: 2 });
        let s = state(16, 200, &[100]);
        assert_eq!(route(&ids(&[5]), Urgency::Normal, &s).unwrap(), PlannedAction::ExactReplay { from_step: 100 });
        let s = state(16, 200, &[99, 120]);
        assert_eq!(route(&ids(&[5]), Urgency::Normal, &s).unwrap(), PlannedAction::ExactReplay { from_step: 75 });
        assert_eq!(route(&ids(&[5]), Urgency::Urgent, &s).unwrap(), PlannedAction::HotPath);
        assert_eq!(route(&ids(&[]), Urgency::Urgent, &s).unwrap(), PlannedAction::Nothing);
        // Influence spanning the window edge is not partially reverted.
        let s = state(16, 200, &[180, 199]);
        assert_eq!(route(&ids(&[5]), Urgency::Normal, &s).unwrap(), PlannedAction::ExactReplay { from_step: 175 });
        assert_eq!(route(&ids(&[5]), Urgency::Urgent, &s).unwrap(), PlannedAction::ExactReplay { from_step: 175 });
        let s = state(16, 200, &[150]);
        assert!(route(&ids(&[700_000, 5]), Urgency::Normal, &s).is_err());
    }

    fn entry(i: u64) -> ManifestEntry {
        ManifestEntry {
            seq: 0,
            prev_entry_hash: String::new(),
            request: ForgetRequest { request_id: i as u128, ids: ids(&[i]), urgency: Urgency::Normal, submitted_at: 1 },
            closure_digest: "00".into(),
            closure_size: 1,
            path_taken: Some(PathTaken::ExactReplay),
            artifacts: BTreeMap::new(),
            thresholds: AuditThresholds::default(),
            outcome: Outcome::Pass,
            servable: true,
            escalated_from: None,
            detail: String::new(),
            recorded_at: 7,
            hmac_tag: String::new(),
        }
    }

    #[test]
    fn chain_verification() {
        let key = b"k";
        let mut log = ManifestLog::default();
        assert!(verify_chain(&log, key).is_ok());
        for i in 0..5 {
            log.append(entry(i), key).unwrap();
            assert_eq!(verify_chain(&log, key), ChainVerdict::Ok { entries: i + 1 });
        }
        let entries = log.entries().unwrap();
        assert_eq!(entries[0].prev_entry_hash, hex::encode(GENESIS_HASH));
        assert_eq!(entries[1].prev_entry_hash, hex::encode(Sha256::digest(entries[0].canonical_bytes().unwrap())));
        // Flip the outcome of entry 3.
        let mut t = log.clone();
        let e3 = serde_json::to_vec(&entries[3]).unwrap();
        let at = t.bytes.windows(e3.len()).position(|w| w == e3.as_slice()).unwrap();
        let rel = e3.windows(6).position(|w| w == b"\"PASS\"").unwrap();
        t.bytes[at + rel + 1] = b'F';
        assert!(matches!(verify_chain(&t, key), ChainVerdict::FirstBad { seq: 3, .. }));
        assert!(!verify_chain(&log, b"other").is_ok());
    }

    #[test]
    fn every_single_byte_tamper_is_detected() {
        let key = b"k";
        let mut log = ManifestLog::default();
        for i in 0..3 {
            log.append(entry(i), key).unwrap();
        }
        for pos in 0..log.bytes.len() {
            let mut t = log.clone();
            t.bytes[pos] ^= 0x01;
            assert!(!verify_chain(&t, key).is_ok(), "byte {pos}");
        }
    }

    proptest! {
        #[test]
        fn routing_priority_never_violated(
            window in 0u32..32, t in 40u32..300, infl in prop::collection::btree_set(0u32..300, 0..4),
            confined in any::<bool>(), urgent in any::<bool>()
        ) {
            let infl: BTreeSet<u32> = infl.into_iter().filter(|&x| x < t).collect();
            let mut s = state(window, t, &[]);
            s.influence = if confined { BTreeSet::new() } else { infl.clone() };
            let req = if confined { ids(&[700_001]) } else { ids(&[9]) };
            let urg = if urgent { Urgency::Urgent } else { Urgency::Normal };
            let a = route(&req, urg, &s).unwrap();
            if confined {
                prop_assert_eq!(a, PlannedAction::AdapterDelete { cohorts: vec![3] });
            } else if infl.is_empty() {
                prop_assert_eq!(a, PlannedAction::Nothing);
            } else {
                let lo = *infl.first().unwrap();
                let hi = *infl.last().unwrap();
                let edge = t.saturating_sub(window);
                if window > 0 && lo >= edge {
                    prop_assert_eq!(a, PlannedAction::RecentRevert { u: t - lo });
                } else if urgent && !(window > 0 && hi >= edge) {
                    prop_assert_eq!(a, PlannedAction::HotPath);
                } else {
                    let k = *s.checkpoints.range(..=lo).next_back().unwrap();
                    prop_assert_eq!(a, PlannedAction::ExactReplay { from_step: k });
                }
            }
            prop_assert_eq!(route(&req, urg, &s).unwrap(), route(&req, urg, &s).unwrap());
        }
    }
}
