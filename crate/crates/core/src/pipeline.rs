//! End-to-end assembly: train a base run with WAL, ring and checkpoints,
//! then fit cohort adapters on the frozen result.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapters::{train_cohort, AdapterConfig, AdapterRegistry};
use crate::checkpoint::Checkpoint;
use crate::closure::{SimHashIndex, DEFAULT_TAU_H, DEFAULT_TAU_SIM};
use crate::corpus::{Canary, Corpus, GeneratedCorpus, SecretItem};
use crate::error::Result;
use crate::model::ModelParams;
use crate::optim::{OptState, TrainConfig};
use crate::ring::{Codec, PatchMode, RingBuffer};
use crate::train::{CheckpointPolicy, TrainHooks, TrainRun, TrainRunResult};
use crate::wal::{IdManifest, MemorySink, Wal, WalWriter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub checkpoint_every: u32,
    pub ring_window: usize,
    pub ring_mode: PatchMode,
    pub adapter: AdapterConfig,
    pub wal_key: Option<Vec<u8>>,
    pub tau_h: u32,
    pub tau_sim: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            checkpoint_every: 25,
            ring_window: 16,
            ring_mode: PatchMode::Xor,
            adapter: AdapterConfig::default(),
            wal_key: Some(b"deployment-key".to_vec()),
            tau_h: DEFAULT_TAU_H,
            tau_sim: DEFAULT_TAU_SIM,
        }
    }
}

/// Audit probes available to the controller.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Probes {
    pub controls: Vec<u64>,
    pub secrets: Vec<SecretItem>,
    pub canaries: Vec<Canary>,
    pub variants: Vec<(u64, u64)>,
    pub retain_eval: Vec<u64>,
}

/// Everything the controller can act on.
#[derive(Clone, Debug)]
pub struct Deployment {
    pub cfg: TrainConfig,
    pub corpus: Corpus,
    pub audit_corpus: Corpus,
    pub wal: Wal,
    pub id_manifest: IdManifest,
    pub wal_key: Option<Vec<u8>>,
    pub checkpoints: BTreeMap<u32, Checkpoint>,
    pub params: ModelParams,
    pub opt: OptState,
    /// Logical steps executed so far; the next step index.
    pub current_step: u32,
    pub ring: RingBuffer,
    pub registry: AdapterRegistry,
    pub cohorts: BTreeMap<u32, BTreeSet<u64>>,
    pub index: SimHashIndex,
    pub tau_h: u32,
    pub tau_sim: f64,
    pub probes: Probes,
    pub forgotten: BTreeSet<u64>,
}

impl Deployment {
    /// Ring patches that end at the newest executed step.
    pub fn effective_window(&self) -> u32 {
        match self.ring.newest_step() {
            Some(s) if s + 1 == self.current_step => self.ring.len() as u32,
            _ => 0,
        }
    }

    pub fn served(&self) -> Result<ModelParams> {
        self.registry.serve(&self.params)
    }
}

/// Trains the base run and cohort adapters for `g`.
pub fn build_deployment(g: &GeneratedCorpus, pc: &PipelineConfig) -> Result<(Deployment, TrainRunResult)> {
    build_with_hooks(g, pc, TrainHooks::default())
}

pub fn build_with_hooks(g: &GeneratedCorpus, pc: &PipelineConfig, hooks: TrainHooks) -> Result<(Deployment, TrainRunResult)> {
    let cfg = &pc.train;
    let mut writer = WalWriter::new(MemorySink::default(), crate::train::run_id(cfg), pc.wal_key.clone());
    let mut ring = RingBuffer::new(pc.ring_window, pc.ring_mode, Codec::Identity, true);
    let result = TrainRun {
        corpus: &g.base,
        cfg,
        wal: &mut writer,
        policy: CheckpointPolicy {
            every: Some(pc.checkpoint_every),
            at: vec![0],
            dir: None,
        },
        ring: Some(&mut ring),
        hooks,
    }
    .run()?;
    let (sink, id_manifest) = writer.finish()?;

    let mut registry = AdapterRegistry::new(&result.params);
    let mut cohorts = BTreeMap::new();
    for (id, members) in &g.split.cohorts {
        let set: BTreeSet<u64> = members.iter().copied().collect();
        let sub = g.cohorts.subset(&set)?;
        let adapter_cfg = AdapterConfig {
            seed: pc.adapter.seed ^ *id as u64,
            ..pc.adapter.clone()
        };
        registry.register(train_cohort(&result.params, &sub, *id, &adapter_cfg)?)?;
        cohorts.insert(*id, set);
    }

    let index_corpus = Corpus::union([&g.base, &g.cohorts])?;
    let dep = Deployment {
        cfg: cfg.clone(),
        corpus: g.base.clone(),
        audit_corpus: Corpus::union([&g.base, &g.controls, &g.cohorts])?,
        wal: Wal::from(sink),
        id_manifest,
        wal_key: pc.wal_key.clone(),
        checkpoints: result.checkpoints.clone(),
        params: result.params.clone(),
        opt: result.opt.clone(),
        current_step: cfg.total_steps,
        ring,
        registry,
        cohorts,
        index: SimHashIndex::build(&index_corpus)?,
        tau_h: pc.tau_h,
        tau_sim: pc.tau_sim,
        probes: Probes {
            controls: g.split.controls.clone(),
            secrets: g.split.secrets.clone(),
            canaries: g.split.canaries.clone(),
            variants: g.split.variants.clone(),
            retain_eval: g.split.retain_eval.clone(),
        },
        forgotten: BTreeSet::new(),
    };
    Ok((dep, result))
}
