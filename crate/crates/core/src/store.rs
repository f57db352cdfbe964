//! On-disk operator workspace holding one deployment.
//!
//! Layout: `corpus/`, `wal/`, `checkpoints/`, `ring/`, `adapters/`,
//! `reports/`, `manifest.log`, plus `deployment.json` and `state.bin` for
//! the live base state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterRegistry;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::closure::SimHashIndex;
use crate::controller::ManifestLog;
use crate::corpus::{Corpus, GeneratedCorpus};
use crate::error::{Error, Result};
use crate::pipeline::{Deployment, PipelineConfig, Probes};
use crate::ring::{Codec, DeltaPatch, PatchMode, RingBuffer};
use crate::train::{checkpoint_file_name, run_id};
use crate::wal::{IdManifest, Wal};

const STATE_FILE: &str = "deployment.json";
const LIVE_FILE: &str = "state.bin";
const ID_MANIFEST: &str = "ids.json";
const RING_FILE: &str = "ring.json";
const REGISTRY_FILE: &str = "registry.json";

/// Mutable deployment facts not recoverable from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DeploymentState {
    pipeline: PipelineConfig,
    current_step: u32,
    cohorts: BTreeMap<u32, BTreeSet<u64>>,
    forgotten: BTreeSet<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct RingLayout {
    window: usize,
    mode: PatchMode,
    codec: Codec,
    revert_optimizer: bool,
    steps: Option<(u32, u32)>,
}

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn wal_dir(&self) -> PathBuf {
        self.root.join("wal")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn ring_dir(&self) -> PathBuf {
        self.root.join("ring")
    }

    pub fn adapter_dir(&self) -> PathBuf {
        self.root.join("adapters")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.log")
    }

    pub fn has_deployment(&self) -> bool {
        self.root.join(STATE_FILE).exists()
    }

    pub fn load_corpus(&self) -> Result<GeneratedCorpus> {
        let dir = self.corpus_dir();
        if !dir.join("split.json").exists() {
            return Err(Error::Precondition(format!("no corpus in {}", dir.display())));
        }
        GeneratedCorpus::read_dir(&dir)
    }

    pub fn load_wal(&self) -> Result<(Wal, IdManifest)> {
        let dir = self.wal_dir();
        if !dir.exists() {
            return Err(Error::Precondition(format!("no WAL in {}", dir.display())));
        }
        Ok((Wal::load_dir(&dir)?, IdManifest::load(&dir.join(ID_MANIFEST))?))
    }

    pub fn load_manifest(&self) -> Result<ManifestLog> {
        let p = self.manifest_path();
        if p.exists() {
            ManifestLog::load(&p)
        } else {
            Ok(ManifestLog::default())
        }
    }

    pub fn save_manifest(&self, log: &ManifestLog) -> Result<()> {
        log.save(&self.manifest_path())
    }

    /// Writes every part of `dep`. The WAL key is never persisted.
    pub fn save(&self, dep: &Deployment, pipeline: &PipelineConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::create_dir_all(self.reports_dir())?;
        let wal_dir = self.wal_dir();
        dep.wal.save_dir(&wal_dir)?;
        dep.id_manifest.save(&wal_dir.join(ID_MANIFEST))?;

        let ck_dir = self.checkpoint_dir();
        fs::create_dir_all(&ck_dir)?;
        let keep: BTreeSet<String> = dep.checkpoints.keys().map(|s| checkpoint_file_name(*s)).collect();
        prune(&ck_dir, "bin", &keep)?;
        for (step, ck) in &dep.checkpoints {
            ck.save(&ck_dir.join(checkpoint_file_name(*step)))?;
        }

        let ring_dir = self.ring_dir();
        fs::create_dir_all(&ring_dir)?;
        let names: BTreeSet<String> = dep.ring.patches().map(|p| patch_file_name(p.step)).collect();
        prune(&ring_dir, "bin", &names)?;
        for p in dep.ring.patches() {
            fs::write(ring_dir.join(patch_file_name(p.step)), p.to_bytes())?;
        }
        let layout = RingLayout {
            window: dep.ring.window,
            mode: dep.ring.mode,
            codec: dep.ring.codec,
            revert_optimizer: dep.ring.revert_optimizer,
            steps: dep.ring.oldest_step().zip(dep.ring.newest_step()),
        };
        fs::write(ring_dir.join(RING_FILE), serde_json::to_vec_pretty(&layout)?)?;

        fs::create_dir_all(self.adapter_dir())?;
        dep.registry.save(&self.adapter_dir().join(REGISTRY_FILE))?;

        let live = Checkpoint {
            params: dep.params.clone(),
            opt: dep.opt.clone(),
            meta: CheckpointMeta {
                shape: dep.cfg.shape,
                logical_step: dep.current_step,
                config_digest: dep.cfg.digest(),
                run_id: hex::encode(run_id(&dep.cfg)),
            },
        };
        live.save(&self.root.join(LIVE_FILE))?;

        let state = DeploymentState {
            pipeline: PipelineConfig {
                wal_key: None,
                ..pipeline.clone()
            },
            current_step: dep.current_step,
            cohorts: dep.cohorts.clone(),
            forgotten: dep.forgotten.clone(),
        };
        let tmp = self.root.join(STATE_FILE).with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&state)?)?;
        fs::rename(tmp, self.root.join(STATE_FILE))?;
        Ok(())
    }

    /// Reassembles the deployment; `wal_key` must match the one used in training.
    pub fn load(&self, wal_key: Option<Vec<u8>>) -> Result<(Deployment, PipelineConfig)> {
        if !self.has_deployment() {
            return Err(Error::Precondition(format!(
                "{} holds no trained deployment",
                self.root.display()
            )));
        }
        let state: DeploymentState = serde_json::from_slice(&fs::read(self.root.join(STATE_FILE))?)?;
        let pipeline = PipelineConfig {
            wal_key: wal_key.clone(),
            ..state.pipeline
        };
        let g = self.load_corpus()?;
        let (wal, id_manifest) = self.load_wal()?;

        let mut checkpoints = BTreeMap::new();
        for path in files_with_ext(&self.checkpoint_dir(), "bin")? {
            let ck = Checkpoint::load(&path)?;
            checkpoints.insert(ck.meta.logical_step, ck);
        }

        let layout: RingLayout = serde_json::from_slice(&fs::read(self.ring_dir().join(RING_FILE))?)?;
        let mut ring = RingBuffer::new(layout.window, layout.mode, layout.codec, layout.revert_optimizer);
        let mut patches = Vec::new();
        for path in files_with_ext(&self.ring_dir(), "bin")? {
            patches.push(DeltaPatch::from_bytes(&fs::read(path)?)?);
        }
        patches.sort_by_key(|p| p.step);
        let found = patches.first().map(|p| p.step).zip(patches.last().map(|p| p.step));
        if found != layout.steps || patches.windows(2).any(|w| w[1].step != w[0].step + 1) {
            return Err(Error::Corruption("ring patches do not match the recorded window".into()));
        }
        patches.into_iter().for_each(|p| ring.push(p));

        let live = Checkpoint::load(&self.root.join(LIVE_FILE))?;
        if live.meta.logical_step != state.current_step || live.meta.config_digest != pipeline.train.digest() {
            return Err(Error::PinDrift("live state does not match the deployment record".into()));
        }
        let registry = AdapterRegistry::load(&self.adapter_dir().join(REGISTRY_FILE))?;
        let index_corpus = Corpus::union([&g.base, &g.cohorts])?;
        let dep = Deployment {
            cfg: pipeline.train.clone(),
            corpus: g.base.clone(),
            audit_corpus: Corpus::union([&g.base, &g.controls, &g.cohorts])?,
            wal,
            id_manifest,
            wal_key,
            checkpoints,
            params: live.params,
            opt: live.opt,
            current_step: state.current_step,
            ring,
            registry,
            cohorts: state.cohorts,
            index: SimHashIndex::build(&index_corpus)?,
            tau_h: pipeline.tau_h,
            tau_sim: pipeline.tau_sim,
            probes: Probes {
                controls: g.split.controls.clone(),
                secrets: g.split.secrets.clone(),
                canaries: g.split.canaries.clone(),
                variants: g.split.variants.clone(),
                retain_eval: g.split.retain_eval.clone(),
            },
            forgotten: state.forgotten,
        };
        Ok((dep, pipeline))
    }
}

fn patch_file_name(step: u32) -> String {
    format!("patch-{step:06}.bin")
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

/// Removes `*.ext` files in `dir` whose names are not in `keep`.
fn prune(dir: &Path, ext: &str, keep: &BTreeSet<String>) -> Result<()> {
    for p in files_with_ext(dir, ext)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !keep.contains(name) {
            fs::remove_file(&p)?;
        }
    }
    Ok(())
}
