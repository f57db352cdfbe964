//! Leakage and utility audits with pass/fail gates.

use serde::{Deserialize, Serialize};

use crate::checkpoint::model_hash;
use crate::corpus::{Canary, Corpus, GeneratedCorpus, SecretItem};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ModelShape, PassOptions};
use crate::optim::{adamw_step, AdamParams, OptState};
use crate::rng::{op, CounterStream};
use crate::tokenizer::{self, Token, BOS};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const MAX_CANARY_BITS: u32 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditThresholds {
    pub mia_band: (f64, f64),
    pub exposure_max: f64,
    pub extraction_max: f64,
    /// Percent.
    pub utility_band: f64,
    pub fuzzy_recall_max: f64,
    /// Smaller forget sets make the AUC meaningless; MIA is then not applicable.
    pub mia_min_samples: usize,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        Self {
            mia_band: (0.45, 0.55),
            exposure_max: 2.0,
            extraction_max: 0.0,
            utility_band: 1.0,
            fuzzy_recall_max: 0.0,
            mia_min_samples: 10,
        }
    }
}

impl AuditThresholds {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mia_band;
        if !(lo < 0.5 && 0.5 < hi) {
            return Err(Error::InvalidConfig("mia band must straddle 0.5".into()));
        }
        if self.exposure_max < 0.0 || self.extraction_max < 0.0 || self.utility_band < 0.0 || self.fuzzy_recall_max < 0.0 {
            return Err(Error::InvalidConfig("audit maxima must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mann-Whitney AUC: probability a positive outscores a negative, ties at ½.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput("auc score set"));
    }
    let mut wins = 0.0f64;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Percentile bootstrap (2.5%, 97.5%) resampling each group independently.
pub fn bootstrap_auc_ci(pos: &[f64], neg: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = CounterStream::new(seed, 0, op::BOOTSTRAP);
    let mut stats = Vec::with_capacity(resamples);
    let mut a = vec![0.0; pos.len()];
    let mut b = vec![0.0; neg.len()];
    for _ in 0..resamples {
        a.iter_mut().for_each(|x| *x = pos[rng.below(pos.len() as u64) as usize]);
        b.iter_mut().for_each(|x| *x = neg[rng.below(neg.len() as u64) as usize]);
        stats.push(auc(&a, &b)?);
    }
    Ok(percentile_ci(&mut stats))
}

fn percentile_ci(stats: &mut [f64]) -> (f64, f64) {
    if stats.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((q * (stats.len() - 1) as f64).round() as usize).min(stats.len() - 1)];
    (at(0.025), at(0.975))
}

/// Mean per-token NLL of one sample.
fn mean_nll(p: &ModelParams, corpus: &Corpus, id: u64) -> Result<f64> {
    let toks = corpus.tokens(id)?;
    let nll = model::token_nlls(p, toks);
    if nll.is_empty() {
        return Err(Error::EmptyInput("sample tokens"));
    }
    Ok(nll.iter().map(|&x| x as f64).sum::<f64>() / nll.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub auc: f64,
    pub ci: (f64, f64),
}

/// Loss-threshold attack with score = -mean token loss; forget samples are
/// the positive class.
pub fn mia_auc(p: &ModelParams, corpus: &Corpus, forget: &[u64], controls: &[u64], seed: u64) -> Result<MiaResult> {
    if forget.is_empty() || controls.is_empty() {
        return Err(Error::EmptyInput("mia forget or control set"));
    }
    let score = |ids: &[u64]| -> Result<Vec<f64>> { ids.iter().map(|&id| Ok(-mean_nll(p, corpus, id)?)).collect() };
    let pos = score(forget)?;
    let neg = score(controls)?;
    Ok(MiaResult {
        auc: auc(&pos, &neg)?,
        ci: bootstrap_auc_ci(&pos, &neg, BOOTSTRAP_RESAMPLES, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureResult {
    pub bits: u32,
    pub rank: u64,
    pub exposure: f64,
}

/// `k - log2(rank)` of the true fill among all `2^k` binary fills, ranked by
/// log-likelihood after the canary prefix. Rank counts strictly better
/// candidates, so ties favour the true canary.
pub fn canary_exposure(p: &ModelParams, canary: &Canary) -> Result<ExposureResult> {
    let k = canary.bits;
    if k == 0 {
        return Err(Error::InvalidConfig("canary needs at least one bit".into()));
    }
    if k > MAX_CANARY_BITS {
        return Err(Error::CanarySpaceTooLarge(k));
    }
    let mut history: Vec<Token> = vec![BOS];
    history.extend(tokenizer::encode_bytes(&canary.prefix));
    let mut scores = vec![0.0f64; 1usize << k];
    fill_scores(p, &mut history, k, 0, 0.0, &mut scores);
    let truth = scores[canary.fill as usize];
    let rank = 1 + scores.iter().filter(|&&s| s > truth).count() as u64;
    Ok(ExposureResult {
        bits: k,
        rank,
        exposure: k as f64 - (rank as f64).log2(),
    })
}

/// Depth-first walk over the binary fill tree; each prefix is scored once.
fn fill_scores(p: &ModelParams, history: &mut Vec<Token>, remaining: u32, fill: usize, acc: f64, out: &mut [f64]) {
    if remaining == 0 {
        out[fill] = acc;
        return;
    }
    let lp = model::next_token_logprobs(p, history);
    for bit in 0..2usize {
        let tok = if bit == 1 { b'1' } else { b'0' } as Token;
        history.push(tok);
        fill_scores(p, history, remaining - 1, (fill << 1) | bit, acc + lp[tok as usize] as f64, out);
        history.pop();
    }
}

/// Greedy-decodes `len(suffix)` bytes after each prefix; rate of exact matches.
pub fn targeted_extraction(p: &ModelParams, items: &[SecretItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("extraction items"));
    }
    let hits = items.iter().filter(|it| extracts(p, &it.prefix, &it.suffix)).count();
    Ok(hits as f64 / items.len() as f64)
}

pub fn extracts(p: &ModelParams, prefix: &str, suffix: &str) -> bool {
    let mut prompt = vec![BOS];
    prompt.extend(tokenizer::encode_bytes(prefix));
    let out = model::greedy_decode(p, &prompt, suffix.len());
    out == tokenizer::encode_bytes(suffix)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rate", rename_all = "snake_case")]
pub enum FuzzyRecall {
    Rate(f64),
    NotApplicable,
}

pub fn fuzzy_recall(p: &ModelParams, variants: &[SecretItem]) -> FuzzyRecall {
    if variants.is_empty() {
        return FuzzyRecall::NotApplicable;
    }
    let hits = variants.iter().filter(|it| extracts(p, &it.prefix, &it.suffix)).count();
    FuzzyRecall::Rate(hits as f64 / variants.len() as f64)
}

/// `exp(mean per-token NLL)` over every predicted token of the eval set.
pub fn retain_ppl(p: &ModelParams, corpus: &Corpus, eval: &[u64]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyInput("retain eval set"));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for &id in eval {
        let nll = model::token_nlls(p, corpus.tokens(id)?);
        sum += nll.iter().map(|&x| x as f64).sum::<f64>();
        n += nll.len();
    }
    Ok((sum / n as f64).exp())
}

/// Extraction probes over the secret and canary documents of a closure.
pub fn closure_items(secrets: &[SecretItem], canaries: &[Canary]) -> Vec<SecretItem> {
    let mut items: Vec<SecretItem> = secrets.to_vec();
    items.extend(canaries.iter().map(|c| SecretItem {
        sample_id: c.sample_id,
        prefix: c.prefix.clone(),
        suffix: Canary::render_fill(c.fill, c.bits),
    }));
    items.sort_by_key(|i| i.sample_id);
    items
}

/// Probes built from near-duplicate variants: the variant's own prefix
/// followed by its parent's secret suffix.
pub fn variant_items(corpus: &Corpus, variants: &[(u64, u64)], parents: &[SecretItem]) -> Result<Vec<SecretItem>> {
    let mut out = Vec::new();
    for &(v, parent) in variants {
        let Some(item) = parents.iter().find(|s| s.sample_id == parent) else {
            continue;
        };
        let text = &corpus.sample(v)?.text;
        if let Some(prefix) = text.strip_suffix(item.suffix.as_str()) {
            out.push(SecretItem {
                sample_id: v,
                prefix: prefix.to_string(),
                suffix: item.suffix.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditInputs {
    pub forget: Vec<u64>,
    pub controls: Vec<u64>,
    pub canaries: Vec<Canary>,
    pub extraction: Vec<SecretItem>,
    pub fuzzy: Vec<SecretItem>,
    pub retain_eval: Vec<u64>,
    /// Retain PPL the utility band is measured against.
    pub reference_ppl: Option<f64>,
    pub seed: u64,
}

impl AuditInputs {
    /// Probes for the forget cohort of a generated corpus.
    pub fn from_generated(g: &GeneratedCorpus) -> Result<Self> {
        let extraction = closure_items(&g.split.secrets, &g.split.canaries);
        let fuzzy = variant_items(&g.base, &g.split.variants, &extraction)?;
        Ok(Self {
            forget: g.split.forget_cohort.clone(),
            controls: g.split.controls.clone(),
            canaries: g.split.canaries.clone(),
            extraction,
            fuzzy,
            retain_eval: g.split.retain_eval.clone(),
            reference_ppl: None,
            seed: 17,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub metric: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model_id: String,
    pub tests: Vec<TestResult>,
    pub pass: bool,
    /// Set when the report fails and the controller must escalate.
    pub escalate: bool,
    pub thresholds: AuditThresholds,
    pub exposures: Vec<ExposureResult>,
    pub retain_ppl: Option<f64>,
}

impl AuditReport {
    pub fn assemble(model_id: String, tests: Vec<TestResult>, thresholds: AuditThresholds) -> Self {
        let pass = !tests.is_empty() && tests.iter().all(|t| t.pass);
        Self {
            model_id,
            tests,
            pass,
            escalate: !pass,
            thresholds,
            exposures: Vec::new(),
            retain_ppl: None,
        }
    }

    pub fn test(&self, name: &str) -> Option<&TestResult> {
        self.tests.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        use sha2::{Digest, Sha256};
        Ok(Sha256::digest(serde_json::to_vec(self)?).into())
    }
}

fn not_applicable(name: &str, why: &str) -> TestResult {
    TestResult {
        name: name.into(),
        metric: None,
        ci: None,
        pass: true,
        detail: format!("not applicable: {why}"),
    }
}

fn failed(name: &str, e: Error) -> TestResult {
    TestResult {
        name: name.into(),
        metric: None,
        ci: None,
        pass: false,
        detail: format!("error: {e}"),
    }
}

/// Runs MIA, exposure, extraction, fuzzy recall and retain utility. Sub-test
/// errors become failed tests.
pub fn run_audit_suite(p: &ModelParams, corpus: &Corpus, inp: &AuditInputs, th: &AuditThresholds) -> Result<AuditReport> {
    th.validate()?;
    let mut tests = Vec::new();

    tests.push(match mia_auc(p, corpus, &inp.forget, &inp.controls, inp.seed) {
        _ if !inp.forget.is_empty() && inp.forget.len() < th.mia_min_samples => {
            not_applicable("mia_auc", &format!("{} forget samples, need {}", inp.forget.len(), th.mia_min_samples))
        }
        Err(Error::EmptyInput(_)) if inp.controls.is_empty() => not_applicable("mia_auc", "no matched controls"),
        Ok(m) => TestResult {
            name: "mia_auc".into(),
            metric: Some(m.auc),
            ci: Some(m.ci),
            pass: th.mia_band.0 <= m.auc && m.auc <= th.mia_band.1,
            detail: format!("band [{}, {}]", th.mia_band.0, th.mia_band.1),
        },
        Err(e) => failed("mia_auc", e),
    });

    let mut exposures = Vec::new();
    let exposure: Result<f64> = inp.canaries.iter().try_fold(0.0f64, |m, c| {
        let r = canary_exposure(p, c)?;
        let e = r.exposure;
        exposures.push(r);
        Ok(m.max(e))
    });
    tests.push(match exposure {
        Ok(_) if inp.canaries.is_empty() => not_applicable("canary_exposure", "no canaries in closure"),
        Ok(max) => {
            let mut vals: Vec<f64> = exposures.iter().map(|r| r.exposure).collect();
            TestResult {
                name: "canary_exposure".into(),
                metric: Some(max),
                ci: Some(bootstrap_mean_ci(&mut vals, inp.seed)),
                pass: max <= th.exposure_max,
                detail: format!("max over {} canaries, E* = {}", exposures.len(), th.exposure_max),
            }
        }
        Err(e) => failed("canary_exposure", e),
    });

    tests.push(match targeted_extraction(p, &inp.extraction) {
        Err(Error::EmptyInput(_)) => not_applicable("targeted_extraction", "no secret prefixes in closure"),
        Ok(r) => TestResult {
            name: "targeted_extraction".into(),
            metric: Some(r),
            ci: None,
            pass: r <= th.extraction_max,
            detail: format!("{} items, p* = {}", inp.extraction.len(), th.extraction_max),
        },
        Err(e) => failed("targeted_extraction", e),
    });

    tests.push(match fuzzy_recall(p, &inp.fuzzy) {
        FuzzyRecall::Rate(r) => TestResult {
            name: "fuzzy_recall".into(),
            metric: Some(r),
            ci: None,
            pass: r <= th.fuzzy_recall_max,
            detail: format!("{} variant probes", inp.fuzzy.len()),
        },
        FuzzyRecall::NotApplicable => not_applicable("fuzzy_recall", "no variants"),
    });

    let mut ppl_value = None;
    tests.push(match retain_ppl(p, corpus, &inp.retain_eval) {
        Ok(ppl) => {
            ppl_value = Some(ppl);
            let (gap, pass) = match inp.reference_ppl {
                Some(r) => {
                    let gap = (ppl - r).abs() / r * 100.0;
                    (Some(gap), gap <= th.utility_band)
                }
                None => (None, ppl.is_finite()),
            };
            TestResult {
                name: "retain_utility".into(),
                metric: Some(ppl),
                ci: None,
                pass,
                detail: match gap {
                    Some(g) => format!("relative gap {g:.6}% vs reference, X = {}%", th.utility_band),
                    None => "no reference perplexity; finite check only".into(),
                },
            }
        }
        Err(e) => failed("retain_utility", e),
    });

    let mut report = AuditReport::assemble(hex::encode(model_hash(p)), tests, th.clone());
    report.exposures = exposures;
    report.retain_ppl = ppl_value;
    Ok(report)
}

fn bootstrap_mean_ci(vals: &mut [f64], seed: u64) -> (f64, f64) {
    let mut rng = CounterStream::new(seed, 1, op::BOOTSTRAP);
    let mut stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..vals.len()).map(|_| vals[rng.below(vals.len() as u64) as usize]).sum::<f64>() / vals.len() as f64)
        .collect();
    percentile_ci(&mut stats)
}

/// Positive control: a fresh model fitted hard on `ids` with sum-reduction
/// AdamW and no weight decay.
pub fn overfit_model(corpus: &Corpus, ids: &[u64], shape: ModelShape, steps: u32, lr: f32, seed: u64) -> Result<ModelParams> {
    let mut p = ModelParams::init(shape, seed);
    let mut o = OptState::new(shape);
    let hp = AdamParams {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
        grad_clip: None,
    };
    for s in 0..steps {
        let g = model::grad(&p, corpus, ids, s as u64, PassOptions::default())?;
        adamw_step(&mut p, &mut o, &g, lr, &hp)?;
    }
    Ok(p)
}
