//! Cohort-scoped low-rank adapters on a frozen base.
//!
//! Adapter `j` contributes `P_j = A_j B_jᵀ` to both dense layers. Serving
//! weights are `base + P_1 + P_2 + ...` in ascending cohort order, so removing
//! a cohort and recomposing restores the served weights exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::model_hash;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ModelShape, PassOptions};
use crate::optim::{adamw_kernel, clip_coef, global_norm, AdamParams};
use crate::rng::{op, RngKey};

/// One rank block: `a` is `rows × rank`, `b` is `cols × rank`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraBlock {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    #[serde(with = "f32_bits")]
    pub a: Vec<f32>,
    #[serde(with = "f32_bits")]
    pub b: Vec<f32>,
}

/// Stores f32 tensors as raw bit patterns so JSON round trips are exact.
mod f32_bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.to_bits()).collect::<Vec<u32>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        Ok(Vec::<u32>::deserialize(d)?.into_iter().map(f32::from_bits).collect())
    }
}

impl LoraBlock {
    fn init(rows: usize, cols: usize, rank: usize, seed: u64, tensor: u64) -> Self {
        let scale = 1.0 / (rows as f32).sqrt();
        let a = (0..rows * rank)
            .map(|i| {
                let u = RngKey::new(seed, tensor, 0, op::ADAPTER_INIT, i as u32).uniform();
                (2.0 * u - 1.0) * scale
            })
            .collect();
        Self {
            rows,
            cols,
            rank,
            a,
            b: vec![0.0; cols * rank],
        }
    }

    /// Adds `A Bᵀ` into `out` (`rows × cols`), summing over rank ascending.
    fn add_product(&self, out: &mut [f32]) {
        for i in 0..self.rows {
            let arow = &self.a[i * self.rank..(i + 1) * self.rank];
            for o in 0..self.cols {
                let brow = &self.b[o * self.rank..(o + 1) * self.rank];
                let mut acc = 0.0f32;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * self.cols + o] += acc;
            }
        }
    }

    /// Factor gradients from the dense gradient `dw` (`rows × cols`).
    fn factor_grads(&self, dw: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let r = self.rank;
        let mut ga = vec![0.0f32; self.rows * r];
        let mut gb = vec![0.0f32; self.cols * r];
        for i in 0..self.rows {
            let drow = &dw[i * self.cols..(i + 1) * self.cols];
            let arow = &self.a[i * r..(i + 1) * r];
            let garow = &mut ga[i * r..(i + 1) * r];
            for (o, &d) in drow.iter().enumerate() {
                let brow = &self.b[o * r..(o + 1) * r];
                let gbrow = &mut gb[o * r..(o + 1) * r];
                for k in 0..r {
                    garow[k] += d * brow[k];
                    gbrow[k] += d * arow[k];
                }
            }
        }
        (ga, gb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub cohort_id: u32,
    /// Cohorts folded into this adapter (just `cohort_id` unless compacted).
    pub members: Vec<u32>,
    pub merged: bool,
    pub shape: ModelShape,
    pub w1: Vec<LoraBlock>,
    pub w2: Vec<LoraBlock>,
}

impl Adapter {
    pub fn new(cohort_id: u32, shape: ModelShape, r1: usize, r2: usize, seed: u64) -> Self {
        let key = seed ^ (cohort_id as u64).wrapping_mul(0x9e37_79b9);
        Self {
            cohort_id,
            members: vec![cohort_id],
            merged: false,
            shape,
            w1: vec![LoraBlock::init(shape.input_dim(), shape.hidden, r1, key, 1)],
            w2: vec![LoraBlock::init(shape.hidden, shape.vocab, r2, key, 2)],
        }
    }

    pub fn rank(&self) -> (usize, usize) {
        (
            self.w1.iter().map(|b| b.rank).sum(),
            self.w2.iter().map(|b| b.rank).sum(),
        )
    }

    /// Dense contributions to `w1` and `w2`: block products summed in order
    /// onto zero buffers.
    pub fn contribution(&self) -> (Vec<f32>, Vec<f32>) {
        let s = self.shape;
        let mut d1 = vec![0.0f32; s.input_dim() * s.hidden];
        let mut d2 = vec![0.0f32; s.hidden * s.vocab];
        for b in &self.w1 {
            let mut p = vec![0.0f32; d1.len()];
            b.add_product(&mut p);
            add_into(&mut d1, &p);
        }
        for b in &self.w2 {
            let mut p = vec![0.0f32; d2.len()];
            b.add_product(&mut p);
            add_into(&mut d2, &p);
        }
        (d1, d2)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("adapter serializes")))
    }

    pub const MAGIC: &'static [u8; 8] = b"UNLADPT1";

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Self::MAGIC.to_vec();
        let json = serde_json::to_vec(self)?;
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        let t = Sha256::digest(&out);
        out.extend(t);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 8 + 32 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Corruption("bad adapter file".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Corruption("adapter trailer mismatch".into()));
        }
        let n = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        if 16 + n != body.len() {
            return Err(Error::Corruption("adapter length mismatch".into()));
        }
        Ok(serde_json::from_slice(&body[16..])?)
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// `base + Σ P_j`, adapters applied in the given order.
pub fn compose<'a>(base: &ModelParams, adapters: impl IntoIterator<Item = &'a Adapter>) -> ModelParams {
    let mut out = base.clone();
    for a in adapters {
        let (d1, d2) = a.contribution();
        add_into(&mut out.w1, &d1);
        add_into(&mut out.w2, &d2);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank_w1: usize,
    pub rank_w2: usize,
    pub steps: u32,
    pub lr: f32,
    pub microbatch_size: usize,
    pub seed: u64,
    pub grad_clip: f32,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank_w1: 8,
            rank_w2: 4,
            steps: 40,
            lr: 1e-2,
            microbatch_size: 4,
            seed: 77,
            grad_clip: 1.0,
        }
    }
}

/// Trains a fresh adapter for `cohort_id` on `cohort` with `base` frozen.
/// Only the adapter factors move; the base hash is checked before and after.
pub fn train_cohort(base: &ModelParams, cohort: &Corpus, cohort_id: u32, cfg: &AdapterConfig) -> Result<Adapter> {
    let base_hash = model_hash(base);
    let mut adapter = Adapter::new(cohort_id, base.shape, cfg.rank_w1, cfg.rank_w2, cfg.seed);
    let ids = cohort.ids();
    if ids.is_empty() && cfg.steps > 0 {
        return Err(Error::EmptyInput("cohort corpus"));
    }
    let hp = AdamParams {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
        grad_clip: None,
    };
    let factor_len = |a: &Adapter| -> Vec<usize> {
        a.w1.iter().chain(&a.w2).flat_map(|b| [b.a.len(), b.b.len()]).collect()
    };
    let lens = factor_len(&adapter);
    let mut m: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
    let mut v = m.clone();
    let mbs = cfg.microbatch_size.max(1);
    for step in 0..cfg.steps {
        let start = step as usize * mbs;
        let batch: Vec<u64> = (0..mbs).map(|k| ids[(start + k) % ids.len()]).collect();
        let served = compose(base, [&adapter]);
        let g = model::grad(&served, cohort, &batch, 0, PassOptions::default())?;
        let mut grads = Vec::new();
        for (blk, dw) in adapter.w1.iter().map(|b| (b, &g.w1)).chain(adapter.w2.iter().map(|b| (b, &g.w2))) {
            let (ga, gb) = blk.factor_grads(dw);
            grads.push(ga);
            grads.push(gb);
        }
        if let Some(coef) = clip_coef(global_norm(grads.iter().map(|x| x.as_slice())), cfg.grad_clip) {
            for gr in grads.iter_mut() {
                gr.iter_mut().for_each(|x| *x *= coef);
            }
        }
        let mut params: Vec<&mut Vec<f32>> = adapter
            .w1
            .iter_mut()
            .chain(adapter.w2.iter_mut())
            .flat_map(|b| [&mut b.a, &mut b.b])
            .collect();
        for (k, p) in params.iter_mut().enumerate() {
            adamw_kernel(p, &grads[k], &mut m[k], &mut v[k], step as u64 + 1, cfg.lr, &hp);
        }
        if model_hash(base) != base_hash {
            return Err(Error::FrozenViolation);
        }
    }
    if model_hash(base) != base_hash {
        return Err(Error::FrozenViolation);
    }
    Ok(adapter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryState {
    Active,
    /// Folded into the compacted adapter with this id.
    Compacted(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JournalOp {
    Register(u32),
    DeleteIntent(u32),
    DeleteCommit(u32),
    Compact { into: u32, members: Vec<u32> },
}

/// Where a simulated crash interrupts deletion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashPoint {
    None,
    AfterIntent,
    AfterRemove,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JournalState {
    Consistent,
    /// A deletion was started but not committed.
    PendingDelete { cohort: u32, removed: bool },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterRegistry {
    pub base_hash: String,
    pub adapters: BTreeMap<u32, Adapter>,
    pub states: BTreeMap<u32, EntryState>,
    pub journal: Vec<JournalOp>,
}

impl AdapterRegistry {
    pub fn new(base: &ModelParams) -> Self {
        Self {
            base_hash: hex::encode(model_hash(base)),
            ..Self::default()
        }
    }

    pub fn contains(&self, cohort: u32) -> bool {
        self.states.contains_key(&cohort)
    }

    pub fn register(&mut self, adapter: Adapter) -> Result<()> {
        let id = adapter.cohort_id;
        if self.states.contains_key(&id) {
            return Err(Error::InvalidConfig(format!("cohort {id} already registered")));
        }
        if adapter.merged {
            return Err(Error::MergedAdapter(id));
        }
        self.journal.push(JournalOp::Register(id));
        self.states.insert(id, EntryState::Active);
        self.adapters.insert(id, adapter);
        Ok(())
    }

    /// Served weights: base plus every registered adapter, ascending id.
    pub fn serve(&self, base: &ModelParams) -> Result<ModelParams> {
        if hex::encode(model_hash(base)) != self.base_hash {
            return Err(Error::FrozenViolation);
        }
        Ok(compose(base, self.adapters.values()))
    }

    /// Re-pins the registry to a new base after an exact base rewrite.
    pub fn rebase(&mut self, base: &ModelParams) {
        self.base_hash = hex::encode(model_hash(base));
    }

    pub fn delete(&mut self, cohort: u32) -> Result<()> {
        self.delete_with_crash(cohort, CrashPoint::None)
    }

    /// Deletion with an optional simulated crash for journal tests.
    pub fn delete_with_crash(&mut self, cohort: u32, crash: CrashPoint) -> Result<()> {
        match self.states.get(&cohort) {
            None => return Err(Error::AdapterAbsent(cohort)),
            Some(EntryState::Compacted(_)) => return Err(Error::CompactedAdapter(cohort)),
            Some(EntryState::Active) => {}
        }
        if self.adapters.get(&cohort).is_some_and(|a| a.merged) {
            return Err(Error::MergedAdapter(cohort));
        }
        if self.adapters.get(&cohort).is_some_and(|a| a.members.len() > 1) {
            return Err(Error::CompactedAdapter(cohort));
        }
        self.journal.push(JournalOp::DeleteIntent(cohort));
        if crash == CrashPoint::AfterIntent {
            return Ok(());
        }
        self.adapters.remove(&cohort);
        if crash == CrashPoint::AfterRemove {
            return Ok(());
        }
        self.states.remove(&cohort);
        self.journal.push(JournalOp::DeleteCommit(cohort));
        Ok(())
    }

    pub fn check_journal(&self) -> JournalState {
        let mut open: Option<u32> = None;
        for op in &self.journal {
            match op {
                JournalOp::DeleteIntent(j) => open = Some(*j),
                JournalOp::DeleteCommit(j) if open == Some(*j) => open = None,
                _ => {}
            }
        }
        match open {
            None => JournalState::Consistent,
            Some(cohort) => JournalState::PendingDelete {
                cohort,
                removed: !self.adapters.contains_key(&cohort),
            },
        }
    }

    /// Rolls an interrupted deletion forward.
    pub fn repair(&mut self) -> JournalState {
        let before = self.check_journal();
        if let JournalState::PendingDelete { cohort, .. } = before {
            self.adapters.remove(&cohort);
            self.states.remove(&cohort);
            self.journal.push(JournalOp::DeleteCommit(cohort));
        }
        before
    }

    /// Folds `cohorts` into one adapter by concatenating rank blocks. The
    /// members lose individual deletability.
    pub fn compact(&mut self, cohorts: &[u32]) -> Result<Adapter> {
        let mut members: Vec<u32> = cohorts.to_vec();
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::EmptyInput("compaction set"));
        }
        for j in &members {
            match self.states.get(j) {
                Some(EntryState::Active) if self.adapters.get(j).is_some_and(|a| !a.merged) => {}
                Some(EntryState::Active) => return Err(Error::MergedAdapter(*j)),
                Some(EntryState::Compacted(_)) => return Err(Error::CompactedAdapter(*j)),
                None => return Err(Error::AdapterAbsent(*j)),
            }
        }
        let into = members[0];
        let mut out: Option<Adapter> = None;
        for j in &members {
            let a = self.adapters.remove(j).expect("checked above");
            out = Some(match out {
                None => a,
                Some(mut acc) => {
                    acc.w1.extend(a.w1);
                    acc.w2.extend(a.w2);
                    acc.members.extend(a.members);
                    acc
                }
            });
        }
        let mut compacted = out.expect("nonempty");
        compacted.cohort_id = into;
        for j in &members {
            self.states.insert(*j, EntryState::Compacted(into));
        }
        self.adapters.insert(into, compacted.clone());
        self.journal.push(JournalOp::Compact {
            into,
            members,
        });
        Ok(compacted)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;

    fn shape() -> ModelShape {
        ModelShape {
            embed_dim: 4,
            context: 3,
            hidden: 6,
            ..ModelShape::default()
        }
    }

    fn cohort(base: u64) -> Corpus {
        Corpus::new(
            (0..6)
                .map(|i| Sample {
                    id: base + i,
                    text: format!("cohort {base} note {i}{i}{i}"),
                })
                .collect(),
        )
        .unwrap()
    }

    fn cfg() -> AdapterConfig {
        AdapterConfig {
            steps: 5,
            ..AdapterConfig::default()
        }
    }

    #[test]
    fn zero_steps_contributes_nothing() {
        let base = ModelParams::init(shape(), 1);
        let a = train_cohort(&base, &cohort(10), 1, &AdapterConfig { steps: 0, ..cfg() }).unwrap();
        let (d1, d2) = a.contribution();
        assert!(d1.iter().chain(&d2).all(|&x| x == 0.0));
        assert!(a.w1[0].a.iter().any(|&x| x != 0.0));
        assert!(compose(&base, [&a]).bit_eq(&base));
    }

    #[test]
    fn training_moves_factors_not_base() {
        let base = ModelParams::init(shape(), 1);
        let before = model_hash(&base);
        let a = train_cohort(&base, &cohort(10), 1, &cfg()).unwrap();
        assert_eq!(model_hash(&base), before);
        let (d1, _) = a.contribution();
        assert!(d1.iter().any(|&x| x != 0.0));
        assert_eq!(a.rank(), (8, 4));
    }

    #[test]
    fn served_equals_explicit_weight_addition() {
        let base = ModelParams::init(shape(), 1);
        let a = train_cohort(&base, &cohort(10), 1, &cfg()).unwrap();
        let served = compose(&base, [&a]);
        let blk = &a.w1[0];
        let mut manual = base.w1.clone();
        for i in 0..blk.rows {
            for o in 0..blk.cols {
                let mut acc = 0.0f32;
                for k in 0..blk.rank {
                    acc += blk.a[i * blk.rank + k] * blk.b[o * blk.rank + k];
                }
                manual[i * blk.cols + o] += 0.0 + acc;
            }
        }
        assert!(served.w1.iter().zip(&manual).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn delete_restores_composition() {
        let base = ModelParams::init(shape(), 1);
        let mut reg = AdapterRegistry::new(&base);
        let a1 = train_cohort(&base, &cohort(10), 1, &cfg()).unwrap();
        let a2 = train_cohort(&base, &cohort(20), 2, &cfg()).unwrap();
        reg.register(a1).unwrap();
        reg.register(a2.clone()).unwrap();
        assert!(!reg.serve(&base).unwrap().bit_eq(&base));
        reg.delete(1).unwrap();
        assert!(reg.serve(&base).unwrap().bit_eq(&compose(&base, [&a2])));
        assert!(matches!(reg.delete(1), Err(Error::AdapterAbsent(1))));
        reg.delete(2).unwrap();
        assert!(reg.serve(&base).unwrap().bit_eq(&base));
        assert_eq!(reg.check_journal(), JournalState::Consistent);
    }

    #[test]
    fn merged_adapters_refuse_deletion() {
        let base = ModelParams::init(shape(), 1);
        let mut reg = AdapterRegistry::new(&base);
        let a = train_cohort(&base, &cohort(10), 1, &AdapterConfig { steps: 0, ..cfg() }).unwrap();
        reg.register(a).unwrap();
        reg.adapters.get_mut(&1).unwrap().merged = true;
        assert!(matches!(reg.delete(1), Err(Error::MergedAdapter(1))));
    }

    #[test]
    fn crash_mid_delete_is_detected_and_repaired() {
        let base = ModelParams::init(shape(), 1);
        let mut reg = AdapterRegistry::new(&base);
        reg.register(train_cohort(&base, &cohort(10), 1, &cfg()).unwrap()).unwrap();
        reg.delete_with_crash(1, CrashPoint::AfterRemove).unwrap();
        assert_eq!(reg.check_journal(), JournalState::PendingDelete { cohort: 1, removed: true });
        reg.repair();
        assert_eq!(reg.check_journal(), JournalState::Consistent);
        assert!(!reg.contains(1));
        assert!(reg.serve(&base).unwrap().bit_eq(&base));
    }

    #[test]
    fn compaction_sums_contributions() {
        let base = ModelParams::init(shape(), 1);
        let mut reg = AdapterRegistry::new(&base);
        let ads: Vec<Adapter> = (1..=3)
            .map(|j| train_cohort(&base, &cohort(10 * j as u64), j, &cfg()).unwrap())
            .collect();
        for a in &ads {
            reg.register(a.clone()).unwrap();
        }
        let single = {
            let mut r = AdapterRegistry::new(&base);
            r.register(ads[0].clone()).unwrap();
            r.compact(&[1]).unwrap()
        };
        assert_eq!(single.contribution(), ads[0].contribution());
        let c = reg.compact(&[3, 1, 2]).unwrap();
        assert_eq!(c.rank(), (24, 12));
        let (c1, c2) = c.contribution();
        let mut s1 = vec![0.0f32; c1.len()];
        let mut s2 = vec![0.0f32; c2.len()];
        for a in &ads {
            let (d1, d2) = a.contribution();
            add_into(&mut s1, &d1);
            add_into(&mut s2, &d2);
        }
        assert!(c1.iter().zip(&s1).all(|(x, y)| crate::ring::ulps_at_scale(*x, *y, *y) <= 1.0));
        assert!(c2.iter().zip(&s2).all(|(x, y)| crate::ring::ulps_at_scale(*x, *y, *y) <= 1.0));
        assert!(matches!(reg.delete(2), Err(Error::CompactedAdapter(2))));
        assert!(matches!(reg.delete(1), Err(Error::CompactedAdapter(1))));
    }

    #[test]
    fn adapter_file_round_trip() {
        let base = ModelParams::init(shape(), 1);
        let a = train_cohort(&base, &cohort(10), 4, &cfg()).unwrap();
        let b = a.to_bytes().unwrap();
        assert_eq!(Adapter::from_bytes(&b).unwrap(), a);
        let mut bad = b.clone();
        bad[30] ^= 1;
        assert!(Adapter::from_bytes(&bad).is_err());
    }
}
