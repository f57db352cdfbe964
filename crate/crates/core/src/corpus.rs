//! Sample store and the synthetic corpus generator.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closure::{hamming, shingle_set, jaccard, simhash64};
use crate::error::{Error, Result};
use crate::rng::{op, CounterStream};
use crate::tokenizer::{self, Token};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub text: String,
}

/// Sealed, read-only collection of samples addressable by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    samples: Vec<Sample>,
    tokens: Vec<Vec<Token>>,
    index: HashMap<u64, usize>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id, i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
        }
        let tokens = samples.iter().map(|s| tokenizer::encode(&s.text)).collect();
        Ok(Self {
            samples,
            tokens,
            index,
        })
    }

    /// Union of several corpora; ids must stay unique.
    pub fn union<'a>(parts: impl IntoIterator<Item = &'a Corpus>) -> Result<Self> {
        let samples = parts
            .into_iter()
            .flat_map(|c| c.samples.iter().cloned())
            .collect();
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn sample(&self, id: u64) -> Result<&Sample> {
        self.index
            .get(&id)
            .map(|&i| &self.samples[i])
            .ok_or(Error::MissingSample(id))
    }

    /// Training tokens (`BOS text EOS`).
    pub fn tokens(&self, id: u64) -> Result<&[Token]> {
        self.index
            .get(&id)
            .map(|&i| self.tokens[i].as_slice())
            .ok_or(Error::MissingSample(id))
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// All ids in ascending order.
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn subset(&self, ids: &BTreeSet<u64>) -> Result<Corpus> {
        let samples = ids
            .iter()
            .map(|&id| self.sample(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(samples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut samples = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line)?);
        }
        Self::new(samples)
    }
}

/// Planted canary: `prefix` followed by a `bits`-character binary fill.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canary {
    pub sample_id: u64,
    pub prefix: String,
    pub fill: u32,
    pub bits: u32,
}

impl Canary {
    pub fn render_fill(fill: u32, bits: u32) -> String {
        (0..bits)
            .rev()
            .map(|b| if (fill >> b) & 1 == 1 { '1' } else { '0' })
            .collect()
    }

    pub fn text(&self) -> String {
        format!("{}{}", self.prefix, Self::render_fill(self.fill, self.bits))
    }
}

/// A `(prefix, secret suffix)` pair for extraction probes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretItem {
    pub sample_id: u64,
    pub prefix: String,
    pub suffix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Ids named by the forget request (originals only).
    pub forget_request: Vec<u64>,
    /// The full forget cohort: request plus planted near-duplicates.
    pub forget_cohort: Vec<u64>,
    pub canaries: Vec<Canary>,
    pub secrets: Vec<SecretItem>,
    /// Near-duplicate variant id -> original id.
    pub variants: Vec<(u64, u64)>,
    /// Held-out controls never used for training, matched to the forget cohort.
    pub controls: Vec<u64>,
    pub retain_eval: Vec<u64>,
    /// Cohort id -> sample ids of that cohort corpus.
    pub cohorts: Vec<(u32, Vec<u64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub size: usize,
    pub forget_size: usize,
    /// Planted near-duplicate variants per original document.
    pub dup_rate: f64,
    pub canaries: usize,
    pub canary_bits: u32,
    pub cohorts: u32,
    pub cohort_size: usize,
    pub retain_eval: usize,
    pub seed: u64,
    pub tau_h: u32,
    pub tau_sim: f64,
}

impl Default for CorpusProfile {
    fn default() -> Self {
        Self {
            size: 2_009,
            forget_size: 45,
            dup_rate: 0.5,
            canaries: 8,
            canary_bits: 10,
            cohorts: 3,
            cohort_size: 24,
            retain_eval: 200,
            seed: 20_240_917,
            tau_h: 3,
            tau_sim: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub base: Corpus,
    pub controls: Corpus,
    pub cohorts: Corpus,
    pub split: Split,
}

impl GeneratedCorpus {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.base.write_jsonl(&dir.join("base.jsonl"))?;
        self.controls.write_jsonl(&dir.join("controls.jsonl"))?;
        self.cohorts.write_jsonl(&dir.join("cohorts.jsonl"))?;
        fs::write(dir.join("split.json"), serde_json::to_vec_pretty(&self.split)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            base: Corpus::read_jsonl(&dir.join("base.jsonl"))?,
            controls: Corpus::read_jsonl(&dir.join("controls.jsonl"))?,
            cohorts: Corpus::read_jsonl(&dir.join("cohorts.jsonl"))?,
            split: serde_json::from_slice(&fs::read(dir.join("split.json"))?)?,
        })
    }

    pub fn retain_ids(&self) -> Vec<u64> {
        let forget: BTreeSet<u64> = self.split.forget_cohort.iter().copied().collect();
        self.base.ids().into_iter().filter(|id| !forget.contains(id)).collect()
    }
}

const BASE_ID: u64 = 10_000;
const CONTROL_ID: u64 = 900_000;
const COHORT_ID: u64 = 700_000;

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ay"];

struct TextGen {
    rng: CounterStream,
}

impl TextGen {
    fn word(&mut self) -> String {
        let syllables = 1 + self.rng.below(3) as usize;
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[self.rng.below(ONSETS.len() as u64) as usize]);
            w.push_str(VOWELS[self.rng.below(VOWELS.len() as u64) as usize]);
        }
        w
    }

    fn words(&mut self, lo: usize, hi: usize) -> String {
        let n = lo + self.rng.below((hi - lo + 1) as u64) as usize;
        (0..n).map(|_| self.word()).collect::<Vec<_>>().join(" ")
    }

    fn digits(&mut self, n: usize) -> String {
        (0..n)
            .map(|_| char::from(b'0' + self.rng.below(10) as u8))
            .collect()
    }

    /// Substitutes one letter of `text` before `protect_from` so that the
    /// result stays within the closure thresholds of the original. Candidate
    /// edits are tried in a shuffled order; `None` if no edit qualifies.
    fn near_duplicate(&mut self, text: &str, protect_from: usize, tau_h: u32, tau_sim: f64) -> Option<String> {
        let orig = tokenizer::encode(text);
        let orig_hash = simhash64(&orig).expect("nonempty");
        let orig_set = shingle_set(&orig);
        let mut edits: Vec<(usize, u8)> = text
            .bytes()
            .enumerate()
            .take(protect_from)
            .filter(|(_, b)| b.is_ascii_lowercase())
            .flat_map(|(i, b)| (b'a'..=b'z').filter(move |&r| r != b).map(move |r| (i, r)))
            .collect();
        self.rng.shuffle(&mut edits);
        edits.into_iter().find_map(|(pos, r)| {
            let mut bytes = text.as_bytes().to_vec();
            bytes[pos] = r;
            let candidate = String::from_utf8(bytes).expect("ascii");
            let toks = tokenizer::encode(&candidate);
            let h = simhash64(&toks).expect("nonempty");
            (hamming(h, orig_hash) <= tau_h && jaccard(&shingle_set(&toks), &orig_set) >= tau_sim)
                .then_some(candidate)
        })
    }
}

/// Deterministic synthetic corpus with planted near-duplicates, canaries and
/// secrets. The forget cohort consists of originals (the request) plus
/// near-duplicate variants of them.
pub fn generate(profile: &CorpusProfile) -> Result<GeneratedCorpus> {
    let p = profile;
    if p.forget_size > p.size || p.forget_size == 0 {
        return Err(Error::InvalidConfig("forget_size must be in 1..=size".into()));
    }
    if p.canary_bits == 0 || p.canary_bits > 20 {
        return Err(Error::InvalidConfig("canary_bits must be in 1..=20".into()));
    }
    if p.dup_rate < 0.0 {
        return Err(Error::InvalidConfig("dup_rate must be nonnegative".into()));
    }
    let split_counts = |n: usize| -> (usize, usize) {
        let originals = ((n as f64) / (1.0 + p.dup_rate)).round().max(1.0) as usize;
        let originals = originals.min(n);
        (originals, n - originals)
    };
    let (forget_orig, forget_var) = split_counts(p.forget_size);
    let (retain_orig, retain_var) = split_counts(p.size - p.forget_size);
    if p.canaries > forget_orig {
        return Err(Error::InvalidConfig("more canaries than forget originals".into()));
    }

    let mut gen = TextGen {
        rng: CounterStream::new(p.seed, 0, op::CORPUS),
    };

    // Documents are generated first, then ids are assigned by a shuffle so
    // forget samples are scattered through the id space.
    struct Doc {
        text: String,
        forget: bool,
        original_of: Option<usize>,
        canary: Option<(String, u32)>,
        secret: Option<(String, String)>,
    }
    let mut docs: Vec<Doc> = Vec::with_capacity(p.size);
    let secret_doc = |gen: &mut TextGen| -> (String, String, String) {
        let prefix = format!("{} secret ", gen.words(5, 7));
        let suffix = gen.digits(10);
        (format!("{prefix}{suffix}"), prefix, suffix)
    };
    let canary_doc = |gen: &mut TextGen| -> (String, String, u32) {
        let prefix = format!("{} pin ", gen.words(5, 7));
        let fill = gen.rng.below(1u64 << p.canary_bits) as u32;
        (
            format!("{prefix}{}", Canary::render_fill(fill, p.canary_bits)),
            prefix,
            fill,
        )
    };

    for i in 0..forget_orig {
        if i < p.canaries {
            let (text, prefix, fill) = canary_doc(&mut gen);
            docs.push(Doc {
                text,
                forget: true,
                original_of: None,
                canary: Some((prefix, fill)),
                secret: None,
            });
        } else {
            let (text, prefix, suffix) = secret_doc(&mut gen);
            docs.push(Doc {
                text,
                forget: true,
                original_of: None,
                canary: None,
                secret: Some((prefix, suffix)),
            });
        }
    }
    let mut parent_cursor = 0usize;
    for _ in 0..forget_var {
        let mut planted = None;
        for _ in 0..forget_orig {
            let parent = parent_cursor % forget_orig;
            parent_cursor += 1;
            let d = &docs[parent];
            let marker = d
                .canary
                .as_ref()
                .map(|c| &c.0)
                .or(d.secret.as_ref().map(|s| &s.0))
                .map_or(d.text.len(), |prefix| prefix.trim_end().rfind(' ').unwrap_or(0));
            let text = d.text.clone();
            if let Some(v) = gen.near_duplicate(&text, marker, p.tau_h, p.tau_sim) {
                planted = Some((v, parent));
                break;
            }
        }
        let (text, parent) = planted
            .ok_or_else(|| Error::InvalidConfig("could not plant forget near-duplicates".into()))?;
        docs.push(Doc {
            text,
            forget: true,
            original_of: Some(parent),
            canary: None,
            secret: None,
        });
    }
    let retain_start = docs.len();
    for _ in 0..retain_orig {
        let text = format!("{} code {}", gen.words(6, 8), gen.digits(4));
        docs.push(Doc {
            text,
            forget: false,
            original_of: None,
            canary: None,
            secret: None,
        });
    }
    let mut parent_cursor = 0usize;
    for _ in 0..retain_var {
        let mut planted = None;
        for _ in 0..retain_orig {
            let parent = retain_start + parent_cursor % retain_orig;
            parent_cursor += 1;
            let text = docs[parent].text.clone();
            let marker = text.rfind(" code ").unwrap_or(text.len());
            if let Some(v) = gen.near_duplicate(&text, marker, p.tau_h, p.tau_sim) {
                planted = Some((v, parent));
                break;
            }
        }
        let (text, parent) = planted
            .ok_or_else(|| Error::InvalidConfig("could not plant retain near-duplicates".into()))?;
        docs.push(Doc {
            text,
            forget: false,
            original_of: Some(parent),
            canary: None,
            secret: None,
        });
    }

    let mut id_order: Vec<u64> = (0..docs.len() as u64).map(|i| BASE_ID + i).collect();
    CounterStream::new(p.seed, 1, op::CORPUS).shuffle(&mut id_order);
    let id_of = |doc: usize| id_order[doc];

    let mut samples: Vec<Sample> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| Sample {
            id: id_of(i),
            text: d.text.clone(),
        })
        .collect();
    samples.sort_by_key(|s| s.id);
    let base = Corpus::new(samples)?;

    let mut split = Split {
        forget_request: Vec::new(),
        forget_cohort: Vec::new(),
        canaries: Vec::new(),
        secrets: Vec::new(),
        variants: Vec::new(),
        controls: Vec::new(),
        retain_eval: Vec::new(),
        cohorts: Vec::new(),
    };
    for (i, d) in docs.iter().enumerate() {
        if d.forget {
            split.forget_cohort.push(id_of(i));
            if d.original_of.is_none() {
                split.forget_request.push(id_of(i));
            }
        }
        if let Some(parent) = d.original_of {
            split.variants.push((id_of(i), id_of(parent)));
        }
        if let Some((prefix, fill)) = &d.canary {
            split.canaries.push(Canary {
                sample_id: id_of(i),
                prefix: prefix.clone(),
                fill: *fill,
                bits: p.canary_bits,
            });
        }
        if let Some((prefix, suffix)) = &d.secret {
            split.secrets.push(SecretItem {
                sample_id: id_of(i),
                prefix: prefix.clone(),
                suffix: suffix.clone(),
            });
        }
    }
    split.forget_request.sort_unstable();
    split.forget_cohort.sort_unstable();
    split.variants.sort_unstable();
    split.canaries.sort_by_key(|c| c.sample_id);
    split.secrets.sort_by_key(|s| s.sample_id);

    let forget: BTreeSet<u64> = split.forget_cohort.iter().copied().collect();
    split.retain_eval = base
        .ids()
        .into_iter()
        .filter(|id| !forget.contains(id))
        .take(p.retain_eval)
        .collect();

    // Controls mirror the forget cohort's templates and length distribution.
    let mut control_samples = Vec::with_capacity(p.forget_size);
    for i in 0..p.forget_size {
        let text = if i < p.canaries {
            canary_doc(&mut gen).0
        } else {
            secret_doc(&mut gen).0
        };
        control_samples.push(Sample {
            id: CONTROL_ID + i as u64,
            text,
        });
    }
    split.controls = control_samples.iter().map(|s| s.id).collect();
    let controls = Corpus::new(control_samples)?;

    let mut cohort_samples = Vec::new();
    for c in 0..p.cohorts {
        let mut ids = Vec::with_capacity(p.cohort_size);
        for i in 0..p.cohort_size {
            let id = COHORT_ID + c as u64 * 1_000 + i as u64;
            let text = format!("{} note {}", gen.words(5, 7), gen.digits(6));
            cohort_samples.push(Sample { id, text });
            ids.push(id);
        }
        split.cohorts.push((c + 1, ids));
    }
    let cohorts = Corpus::new(cohort_samples)?;

    Ok(GeneratedCorpus {
        base,
        controls,
        cohorts,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusProfile {
        CorpusProfile {
            size: 120,
            forget_size: 12,
            canaries: 3,
            retain_eval: 20,
            cohort_size: 5,
            ..CorpusProfile::default()
        }
    }

    #[test]
    fn default_profile_split_sizes() {
        let g = generate(&CorpusProfile::default()).unwrap();
        assert_eq!(g.base.len(), 2_009);
        assert_eq!(g.split.forget_cohort.len(), 45);
        assert_eq!(g.retain_ids().len(), 1_964);
        assert_eq!(g.split.forget_request.len(), 30);
        assert_eq!(g.split.canaries.len(), 8);
        assert_eq!(g.controls.len(), 45);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.base.samples(), b.base.samples());
        assert_eq!(a.split, b.split);
        let c = generate(&CorpusProfile { seed: 1, ..small() }).unwrap();
        assert_ne!(a.base.samples(), c.base.samples());
    }

    #[test]
    fn canary_text_matches_sample() {
        let g = generate(&small()).unwrap();
        for c in &g.split.canaries {
            assert_eq!(g.base.sample(c.sample_id).unwrap().text, c.text());
        }
        for s in &g.split.secrets {
            let text = &g.base.sample(s.sample_id).unwrap().text;
            assert_eq!(text, &format!("{}{}", s.prefix, s.suffix));
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Sample {
            id: 1,
            text: "a".into(),
        };
        assert!(Corpus::new(vec![s.clone(), s]).is_err());
    }

    #[test]
    fn missing_sample_errors() {
        let g = generate(&small()).unwrap();
        assert!(matches!(g.base.tokens(1), Err(Error::MissingSample(1))));
    }

    #[test]
    fn jsonl_round_trip() {
        let g = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write_dir(dir.path()).unwrap();
        let back = GeneratedCorpus::read_dir(dir.path()).unwrap();
        assert_eq!(back.base.samples(), g.base.samples());
        assert_eq!(back.split, g.split);
    }
}
