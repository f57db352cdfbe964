//! Near-duplicate expansion of a forget request.
//!
//! Documents are fingerprinted with a 64-bit SimHash over 4-token shingles.
//! Four 16-bit LSH bands propose candidates; admission always re-checks the
//! exact Hamming and Jaccard thresholds.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tokenizer::Token;

pub const SHINGLE: usize = 4;
pub const BANDS: usize = 4;
pub const BAND_BITS: u32 = 16;
pub const DEFAULT_TAU_H: u32 = 3;
pub const DEFAULT_TAU_SIM: f64 = 0.8;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a over the little-endian bytes of a token window.
pub fn shingle_hash(window: &[Token]) -> u64 {
    let mut bytes = Vec::with_capacity(window.len() * 2);
    for t in window {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Shingle hashes in document order. Documents shorter than a shingle
/// contribute one shingle covering the whole document.
pub fn shingles(tokens: &[Token]) -> Vec<u64> {
    if tokens.is_empty() {
        return Vec::new();
    }
    if tokens.len() < SHINGLE {
        return vec![shingle_hash(tokens)];
    }
    tokens.windows(SHINGLE).map(shingle_hash).collect()
}

pub fn shingle_set(tokens: &[Token]) -> BTreeSet<u64> {
    shingles(tokens).into_iter().collect()
}

pub fn jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Signed per-bit vote over shingle hashes; a bit is set when its vote is
/// strictly positive.
pub fn simhash64(tokens: &[Token]) -> Result<u64> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("document"));
    }
    let mut votes = [0i64; 64];
    for h in shingles(tokens) {
        for (bit, v) in votes.iter_mut().enumerate() {
            if (h >> bit) & 1 == 1 {
                *v += 1;
            } else {
                *v -= 1;
            }
        }
    }
    let mut out = 0u64;
    for (bit, v) in votes.iter().enumerate() {
        if *v > 0 {
            out |= 1 << bit;
        }
    }
    Ok(out)
}

fn band_key(hash: u64, band: usize) -> u16 {
    (hash >> (band as u32 * BAND_BITS)) as u16
}

#[derive(Clone, Debug)]
struct DocEntry {
    hash: u64,
    shingles: BTreeSet<u64>,
}

/// SimHash fingerprints for every corpus document plus band postings.
#[derive(Clone, Debug)]
pub struct SimHashIndex {
    docs: BTreeMap<u64, DocEntry>,
    bands: Vec<HashMap<u16, Vec<u64>>>,
}

impl SimHashIndex {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        let mut docs = BTreeMap::new();
        let mut bands: Vec<HashMap<u16, Vec<u64>>> = vec![HashMap::new(); BANDS];
        for id in corpus.ids() {
            let toks = corpus.tokens(id)?;
            let hash = simhash64(toks)?;
            for (b, postings) in bands.iter_mut().enumerate() {
                postings.entry(band_key(hash, b)).or_default().push(id);
            }
            docs.insert(
                id,
                DocEntry {
                    hash,
                    shingles: shingle_set(toks),
                },
            );
        }
        Ok(Self { docs, bands })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.docs.contains_key(&id)
    }

    pub fn hash(&self, id: u64) -> Option<u64> {
        self.docs.get(&id).map(|d| d.hash)
    }

    /// Band-colliding documents other than `id`, ascending.
    pub fn candidates(&self, id: u64) -> BTreeSet<u64> {
        let mut out = BTreeSet::new();
        if let Some(d) = self.docs.get(&id) {
            for (b, postings) in self.bands.iter().enumerate() {
                if let Some(list) = postings.get(&band_key(d.hash, b)) {
                    out.extend(list.iter().copied().filter(|&y| y != id));
                }
            }
        }
        out
    }

    /// Exact similarity check: `(hamming, jaccard)` if both thresholds pass.
    pub fn similar(&self, x: u64, y: u64, tau_h: u32, tau_sim: f64) -> Option<(u32, f64)> {
        let (a, b) = (self.docs.get(&x)?, self.docs.get(&y)?);
        let ham = hamming(a.hash, b.hash);
        if ham > tau_h {
            return None;
        }
        let sim = jaccard(&a.shingles, &b.shingles);
        (sim >= tau_sim).then_some((ham, sim))
    }

    /// All pairs `x < y` passing both thresholds, by exhaustive scan.
    pub fn all_pairs(&self, tau_h: u32, tau_sim: f64) -> Vec<(u64, u64)> {
        let ids: Vec<u64> = self.docs.keys().copied().collect();
        let mut out = Vec::new();
        for (i, &x) in ids.iter().enumerate() {
            for &y in &ids[i + 1..] {
                if self.similar(x, y, tau_h, tau_sim).is_some() {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEdge {
    pub from: u64,
    pub to: u64,
    pub similarity: f64,
    pub hamming: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgetClosure {
    pub requested: BTreeSet<u64>,
    pub expanded: BTreeSet<u64>,
    pub edges: Vec<ProvenanceEdge>,
    pub tau_h: u32,
    pub tau_sim: f64,
}

impl ForgetClosure {
    /// A closure containing exactly `ids`, with no expansion.
    pub fn exact(ids: impl IntoIterator<Item = u64>) -> Self {
        let set: BTreeSet<u64> = ids.into_iter().collect();
        Self {
            requested: set.clone(),
            expanded: set,
            edges: Vec::new(),
            tau_h: DEFAULT_TAU_H,
            tau_sim: DEFAULT_TAU_SIM,
        }
    }

    pub fn empty() -> Self {
        Self::exact([])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.expanded.contains(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.expanded.is_empty()
    }

    pub fn len(&self) -> usize {
        self.expanded.len()
    }

    /// Added ids (expanded minus requested).
    pub fn variants(&self) -> BTreeSet<u64> {
        self.expanded.difference(&self.requested).copied().collect()
    }

    /// SHA-256 over the sorted expanded ids (u64 LE).
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.expanded {
            h.update(id.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.requested.extend(&other.requested);
        out.expanded.extend(&other.expanded);
        out.edges.extend(other.edges.iter().cloned());
        out
    }
}

/// Breadth-first fixed-point expansion from `request`.
pub fn expand_closure(
    request: &BTreeSet<u64>,
    index: &SimHashIndex,
    tau_h: u32,
    tau_sim: f64,
) -> Result<ForgetClosure> {
    let unknown: Vec<u64> = request.iter().copied().filter(|id| !index.contains(*id)).collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownIds(unknown));
    }
    let mut expanded = request.clone();
    let mut frontier: VecDeque<u64> = request.iter().copied().collect();
    let mut edges = Vec::new();
    while let Some(x) = frontier.pop_front() {
        for y in index.candidates(x) {
            if expanded.contains(&y) {
                continue;
            }
            if let Some((ham, sim)) = index.similar(x, y, tau_h, tau_sim) {
                expanded.insert(y);
                frontier.push_back(y);
                edges.push(ProvenanceEdge {
                    from: x,
                    to: y,
                    similarity: sim,
                    hamming: ham,
                });
            }
        }
    }
    Ok(ForgetClosure {
        requested: request.clone(),
        expanded,
        edges,
        tau_h,
        tau_sim,
    })
}
