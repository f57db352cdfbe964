#![allow(dead_code)]

use std::collections::BTreeSet;

use unlearn_core::closure::ForgetClosure;
use unlearn_core::corpus::{Corpus, Sample};
use unlearn_core::optim::TrainConfig;
use unlearn_core::ring::RingBuffer;
use unlearn_core::train::{run_id, CheckpointPolicy, TrainHooks, TrainRun, TrainRunResult};
use unlearn_core::wal::{IdManifest, MemorySink, Wal, WalWriter};

pub const KEY: &[u8] = b"deployment-key";

pub struct Run {
    pub result: TrainRunResult,
    pub wal: Wal,
    pub manifest: IdManifest,
}

pub fn corpus(n: u64) -> Corpus {
    Corpus::new(
        (0..n)
            .map(|i| Sample { id: 1000 + i, text: format!("doc {i} says {} and {}", i * 31 % 97, i * 7 % 13) })
            .collect(),
    )
    .unwrap()
}

pub fn cfg(steps: u32) -> TrainConfig {
    TrainConfig { total_steps: steps, warmup_steps: 3.min(steps), ..TrainConfig::default() }
}

pub fn run(corpus: &Corpus, cfg: &TrainConfig, policy: CheckpointPolicy, ring: Option<&mut RingBuffer>) -> Run {
    let mut w = WalWriter::new(MemorySink::default(), run_id(cfg), Some(KEY.to_vec()));
    let result = TrainRun { corpus, cfg, wal: &mut w, policy, ring, hooks: TrainHooks::default() }.run().unwrap();
    let (sink, manifest) = w.finish().unwrap();
    Run { result, wal: Wal::from(sink), manifest }
}

/// Ids of every microbatch of logical step `t`.
pub fn step_ids(r: &Run, t: u32) -> BTreeSet<u64> {
    r.wal
        .records(Some(KEY))
        .unwrap()
        .iter()
        .filter(|rec| rec.opt_step_u32 == t)
        .flat_map(|rec| r.manifest.resolve(rec, Some(KEY)).unwrap().to_vec())
        .collect()
}

pub fn closure(ids: impl IntoIterator<Item = u64>) -> ForgetClosure {
    ForgetClosure::exact(ids)
}
