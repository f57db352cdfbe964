//! Approximate unlearning: diagonal-Fisher preconditioned ascent on the
//! forget loss with a trust region, followed by a short retain-tune.
//! Results of this path are never exact and must pass audits to be served.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, PassOptions};
use crate::optim::{adamw_step, AdamParams, OptState};
use crate::rng::{op, CounterStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub h: Vec<f32>,
    pub damping: f32,
    pub sample_count: usize,
}

impl FisherDiag {
    /// `1e-3 * mean(h) + 1e-8`.
    pub fn default_damping(h: &[f32]) -> f32 {
        let mean = if h.is_empty() {
            0.0
        } else {
            h.iter().map(|&x| x as f64).sum::<f64>() / h.len() as f64
        };
        (1e-3 * mean + 1e-8) as f32
    }

    /// `sqrt(Σ h_i δ_i²)`.
    pub fn norm(&self, delta: &[f32]) -> f64 {
        self.h
            .iter()
            .zip(delta)
            .map(|(&h, &d)| h as f64 * (d as f64) * (d as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Mean of squared per-example gradients over `sample`, in sample order.
pub fn estimate_fisher_diag(
    params: &ModelParams,
    corpus: &Corpus,
    sample: &[u64],
    damping: Option<f32>,
) -> Result<FisherDiag> {
    if sample.is_empty() {
        return Err(Error::EmptyInput("fisher sample"));
    }
    let mut acc = vec![0.0f32; params.numel()];
    for &id in sample {
        let (g, _) = model::example_grad(params, corpus, id, 0, PassOptions::default())?;
        for (a, x) in acc.iter_mut().zip(g.flatten()) {
            *a += x * x;
        }
    }
    let n = sample.len() as f32;
    acc.iter_mut().for_each(|a| *a /= n);
    let damping = damping.unwrap_or_else(|| FisherDiag::default_damping(&acc));
    Ok(FisherDiag {
        h: acc,
        damping,
        sample_count: sample.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotPathConfig {
    pub eta: f32,
    pub max_steps: u32,
    pub trust_radius: f64,
    pub retain_steps: u32,
    pub retain_lr: f32,
    /// Allowed relative retain-loss increase, in percent.
    pub utility_band_pct: f64,
    pub eta_floor: f32,
    pub retain_microbatch: usize,
    pub seed: u64,
}

impl Default for HotPathConfig {
    fn default() -> Self {
        Self {
            eta: 1e-2,
            max_steps: 3,
            trust_radius: 1.0,
            retain_steps: 4,
            retain_lr: 1e-4,
            utility_band_pct: 1.0,
            eta_floor: 1e-8,
            retain_microbatch: 8,
            seed: 5,
        }
    }
}

impl HotPathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.trust_radius > 0.0 && self.utility_band_pct >= 0.0 && self.eta_floor > 0.0) {
            return Err(Error::InvalidConfig("hot-path parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Losses and gradient the anti-update needs, over flat parameter vectors.
pub trait Objective {
    fn forget_loss(&self, params: &[f32]) -> Result<f64>;
    fn retain_loss(&self, params: &[f32]) -> Result<f64>;
    fn forget_grad(&self, params: &[f32]) -> Result<Vec<f32>>;
}

/// Model-backed objective: summed loss over forget ids and a retain sample.
pub struct ModelObjective<'a> {
    pub corpus: &'a Corpus,
    pub shape: model::ModelShape,
    pub forget: Vec<u64>,
    pub retain: Vec<u64>,
}

impl Objective for ModelObjective<'_> {
    fn forget_loss(&self, p: &[f32]) -> Result<f64> {
        let m = ModelParams::from_flat(self.shape, p)?;
        Ok(model::forward_loss_sum(&m, self.corpus, &self.forget)?.0)
    }

    fn retain_loss(&self, p: &[f32]) -> Result<f64> {
        let m = ModelParams::from_flat(self.shape, p)?;
        Ok(model::forward_loss_sum(&m, self.corpus, &self.retain)?.0)
    }

    fn forget_grad(&self, p: &[f32]) -> Result<Vec<f32>> {
        let m = ModelParams::from_flat(self.shape, p)?;
        Ok(model::grad(&m, self.corpus, &self.forget, 0, PassOptions::default())?.flatten())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AntiStepReport {
    pub eta: f32,
    pub backtracks: u32,
    pub trust_norm: f64,
    pub forget_before: f64,
    pub forget_after: f64,
    pub retain_before: f64,
    pub retain_after: f64,
}

/// `δ = η g / (h + λ)` elementwise.
pub fn preconditioned_step(g: &[f32], fisher: &FisherDiag, eta: f32) -> Vec<f32> {
    g.iter()
        .zip(&fisher.h)
        .map(|(&gi, &hi)| eta * gi / (hi + fisher.damping))
        .collect()
}

/// One anti-update with halving backtracking. Returns the new parameters
/// or `HotPathInfeasible` once `eta` drops below the floor.
pub fn anti_update(
    params: &[f32],
    g: &[f32],
    fisher: &FisherDiag,
    cfg: &HotPathConfig,
    obj: &dyn Objective,
) -> Result<(Vec<f32>, AntiStepReport)> {
    if g.len() != params.len() || fisher.h.len() != params.len() {
        return Err(Error::ShapeMismatch("gradient, fisher and params differ in length".into()));
    }
    if !(fisher.damping > 0.0) {
        return Err(Error::Precondition("fisher damping must be positive".into()));
    }
    let forget_before = obj.forget_loss(params)?;
    let retain_before = obj.retain_loss(params)?;
    if g.iter().all(|&x| x == 0.0) {
        return Ok((
            params.to_vec(),
            AntiStepReport {
                eta: 0.0,
                backtracks: 0,
                trust_norm: 0.0,
                forget_before,
                forget_after: forget_before,
                retain_before,
                retain_after: retain_before,
            },
        ));
    }
    let limit = retain_before * (1.0 + cfg.utility_band_pct / 100.0);
    let mut eta = cfg.eta;
    let mut backtracks = 0;
    while eta >= cfg.eta_floor {
        let delta = preconditioned_step(g, fisher, eta);
        let norm = fisher.norm(&delta);
        if norm <= cfg.trust_radius {
            let cand: Vec<f32> = params.iter().zip(&delta).map(|(p, d)| p + d).collect();
            if cand.iter().all(|x| x.is_finite()) {
                let forget_after = obj.forget_loss(&cand)?;
                let retain_after = obj.retain_loss(&cand)?;
                if forget_after > forget_before && retain_after <= limit {
                    assert!(norm <= cfg.trust_radius);
                    return Ok((
                        cand,
                        AntiStepReport {
                            eta,
                            backtracks,
                            trust_norm: norm,
                            forget_before,
                            forget_after,
                            retain_before,
                            retain_after,
                        },
                    ));
                }
            }
        }
        eta *= 0.5;
        backtracks += 1;
    }
    Err(Error::HotPathInfeasible(format!(
        "no step size above {} met the trust region and loss gates",
        cfg.eta_floor
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainTuneReport {
    pub steps: u32,
    pub loss_before: f64,
    pub loss_after: f64,
    pub warning: Option<String>,
}

/// `steps` sum-reduction AdamW updates on cyclic retain minibatches drawn in
/// a seeded order. `eval` is the retain slice used to measure the loss.
#[allow(clippy::too_many_arguments)]
pub fn retain_tune(
    params: &ModelParams,
    opt: &OptState,
    corpus: &Corpus,
    retain: &[u64],
    eval: &[u64],
    steps: u32,
    lr: f32,
    microbatch: usize,
    seed: u64,
) -> Result<(ModelParams, OptState, RetainTuneReport)> {
    let loss_before = if eval.is_empty() {
        0.0
    } else {
        model::forward_loss_sum(params, corpus, eval)?.0
    };
    let (mut p, mut o) = (params.clone(), opt.clone());
    if steps > 0 {
        if retain.is_empty() {
            return Err(Error::EmptyInput("retain sample"));
        }
        let mut order = retain.to_vec();
        CounterStream::new(seed, 0, op::RETAIN_TUNE).shuffle(&mut order);
        let hp = AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        };
        let mb = microbatch.max(1);
        for s in 0..steps as usize {
            let batch: Vec<u64> = (0..mb).map(|k| order[(s * mb + k) % order.len()]).collect();
            let g = model::grad(&p, corpus, &batch, seed ^ s as u64, PassOptions::default())?;
            adamw_step(&mut p, &mut o, &g, lr, &hp)?;
        }
    }
    let loss_after = if eval.is_empty() {
        0.0
    } else {
        model::forward_loss_sum(&p, corpus, eval)?.0
    };
    let warning = (loss_after > loss_before).then(|| {
        format!("retain loss rose during retain-tune: {loss_before:.6} -> {loss_after:.6}")
    });
    Ok((
        p,
        o,
        RetainTuneReport {
            steps,
            loss_before,
            loss_after,
            warning,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotPathReport {
    pub feasible: bool,
    pub steps: Vec<AntiStepReport>,
    pub retain_tune: Option<RetainTuneReport>,
    pub failure: Option<String>,
    /// Approximate results are only servable after audits pass.
    pub servable: bool,
}

/// Runs up to `max_steps` anti-updates then a retain-tune. Infeasibility
/// is reported, not raised, so the caller can escalate.
pub fn hot_path_unlearn(
    params: &ModelParams,
    opt: &OptState,
    obj: &ModelObjective,
    fisher: &FisherDiag,
    cfg: &HotPathConfig,
    retain_pool: &[u64],
) -> Result<(ModelParams, OptState, HotPathReport)> {
    cfg.validate()?;
    let mut flat = params.flatten();
    let mut steps = Vec::new();
    for _ in 0..cfg.max_steps {
        let g = obj.forget_grad(&flat)?;
        match anti_update(&flat, &g, fisher, cfg, obj) {
            Ok((next, rep)) => {
                flat = next;
                steps.push(rep);
            }
            Err(Error::HotPathInfeasible(msg)) => {
                if steps.is_empty() {
                    return Ok((
                        params.clone(),
                        opt.clone(),
                        HotPathReport {
                            feasible: false,
                            steps,
                            retain_tune: None,
                            failure: Some(msg),
                            servable: false,
                        },
                    ));
                }
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let p = ModelParams::from_flat(params.shape, &flat)?;
    let (p, o, rt) = retain_tune(
        &p,
        opt,
        obj.corpus,
        retain_pool,
        &obj.retain,
        cfg.retain_steps,
        cfg.retain_lr,
        cfg.retain_microbatch,
        cfg.seed,
    )?;
    Ok((
        p,
        o,
        HotPathReport {
            feasible: true,
            steps,
            retain_tune: Some(rt),
            failure: None,
            servable: false,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;
    use crate::model::ModelShape;
    use proptest::prelude::*;

    /// `ℓ_f = ½ h (θ - a)²` per coordinate, retain loss constant.
    struct Quadratic {
        h: f32,
        a: f32,
    }

    impl Objective for Quadratic {
        fn forget_loss(&self, p: &[f32]) -> Result<f64> {
            Ok(p.iter().map(|&x| 0.5 * self.h as f64 * ((x - self.a) as f64).powi(2)).sum())
        }
        fn retain_loss(&self, _: &[f32]) -> Result<f64> {
            Ok(1.0)
        }
        fn forget_grad(&self, p: &[f32]) -> Result<Vec<f32>> {
            Ok(p.iter().map(|&x| self.h * (x - self.a)).collect())
        }
    }

    fn cfg() -> HotPathConfig {
        HotPathConfig {
            eta: 0.1,
            trust_radius: 10.0,
            ..HotPathConfig::default()
        }
    }

    #[test]
    fn one_d_quadratic_closed_form() {
        let q = Quadratic { h: 2.0, a: 0.5 };
        let theta = [1.5f32];
        let fisher = FisherDiag { h: vec![2.0], damping: 0.1, sample_count: 1 };
        let g = q.forget_grad(&theta).unwrap();
        let (out, rep) = anti_update(&theta, &g, &fisher, &cfg(), &q).unwrap();
        let expect = 0.1f32 * (1.5 - 0.5) * 2.0 / (2.0 + 0.1);
        assert!((out[0] - theta[0] - expect).abs() < 1e-6);
        assert_eq!(rep.backtracks, 0);
        assert!(rep.forget_after > rep.forget_before);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let q = Quadratic { h: 1.0, a: 0.0 };
        let theta = [0.0f32, 0.0];
        let fisher = FisherDiag { h: vec![1.0, 1.0], damping: 1e-3, sample_count: 1 };
        let (out, _) = anti_update(&theta, &[0.0, 0.0], &fisher, &cfg(), &q).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn trust_region_forces_backtracking() {
        let q = Quadratic { h: 1.0, a: 0.0 };
        let theta = [4.0f32];
        let fisher = FisherDiag { h: vec![1.0], damping: 1e-3, sample_count: 1 };
        let g = q.forget_grad(&theta).unwrap();
        let c = HotPathConfig { eta: 1.0, trust_radius: 0.5, ..cfg() };
        let (_, rep) = anti_update(&theta, &g, &fisher, &c, &q).unwrap();
        assert!(rep.backtracks >= 3);
        assert!(rep.trust_norm <= 0.5);
        let tight = HotPathConfig { trust_radius: 1e-12, ..c };
        assert!(matches!(anti_update(&theta, &g, &fisher, &tight, &q), Err(Error::HotPathInfeasible(_))));
    }

    fn corpus() -> Corpus {
        Corpus::new(
            (0..12)
                .map(|i| Sample { id: i, text: format!("line {i} of the retain slice {}", i * 7) })
                .collect(),
        )
        .unwrap()
    }

    fn shape() -> ModelShape {
        ModelShape { embed_dim: 4, context: 3, hidden: 6, ..ModelShape::default() }
    }

    #[test]
    fn fisher_single_and_pair() {
        let p = ModelParams::init(shape(), 2);
        let c = corpus();
        let f1 = estimate_fisher_diag(&p, &c, &[3], None).unwrap();
        let (g3, _) = model::example_grad(&p, &c, 3, 0, PassOptions::default()).unwrap();
        assert!(f1.h.iter().zip(g3.flatten()).all(|(h, g)| h.to_bits() == (g * g).to_bits()));
        let f2 = estimate_fisher_diag(&p, &c, &[3, 5], Some(0.5)).unwrap();
        let (g5, _) = model::example_grad(&p, &c, 5, 0, PassOptions::default()).unwrap();
        for ((h, a), b) in f2.h.iter().zip(g3.flatten()).zip(g5.flatten()) {
            assert_eq!(h.to_bits(), ((a * a + b * b) / 2.0).to_bits());
        }
        assert_eq!(f2.damping, 0.5);
        assert!(f2.h.iter().all(|&x| x >= 0.0));
        assert!(estimate_fisher_diag(&p, &c, &[], None).is_err());
    }

    #[test]
    fn retain_tune_identity_and_determinism() {
        let p = ModelParams::init(shape(), 2);
        let o = OptState::new(shape());
        let c = corpus();
        let ids: Vec<u64> = (0..12).collect();
        let (p0, o0, _) = retain_tune(&p, &o, &c, &ids, &ids, 0, 1e-3, 4, 1).unwrap();
        assert!(p0.bit_eq(&p) && o0.bit_eq(&o));
        let (a, _, ra) = retain_tune(&p, &o, &c, &ids, &ids, 10, 1e-2, 4, 1).unwrap();
        let (b, _, _) = retain_tune(&p, &o, &c, &ids, &ids, 10, 1e-2, 4, 1).unwrap();
        assert!(a.bit_eq(&b));
        assert!(ra.loss_after <= ra.loss_before);
    }

    #[test]
    fn hot_path_raises_forget_loss_on_model() {
        let p = ModelParams::init(shape(), 2);
        let c = corpus();
        let obj = ModelObjective { corpus: &c, shape: shape(), forget: vec![1, 2], retain: (3..12).collect() };
        let fisher = estimate_fisher_diag(&p, &c, &obj.retain, None).unwrap();
        let hc = HotPathConfig { utility_band_pct: 5.0, retain_steps: 0, ..HotPathConfig::default() };
        let (q, _, rep) = hot_path_unlearn(&p, &OptState::new(shape()), &obj, &fisher, &hc, &obj.retain.clone()).unwrap();
        assert!(rep.feasible, "{:?}", rep.failure);
        assert!(obj.forget_loss(&q.flatten()).unwrap() > obj.forget_loss(&p.flatten()).unwrap());
        for s in &rep.steps {
            assert!(s.trust_norm <= hc.trust_radius);
        }
    }

    proptest! {
        #[test]
        fn direction_preserves_sign(g in prop::collection::vec(-10f32..10.0, 1..20), h in 0f32..5.0, lam in 1e-4f32..1.0) {
            let fisher = FisherDiag { h: vec![h; g.len()], damping: lam, sample_count: 1 };
            let d = preconditioned_step(&g, &fisher, 0.1);
            for (x, y) in d.iter().zip(&g) {
                prop_assert!(x.signum() == y.signum() || *y == 0.0);
            }
        }

        #[test]
        fn damping_shrinks_step(g in -5f32..5.0, h in 0f32..5.0, l1 in 1e-3f32..1.0, extra in 0f32..100.0) {
            let a = preconditioned_step(&[g], &FisherDiag { h: vec![h], damping: l1, sample_count: 1 }, 0.1);
            let b = preconditioned_step(&[g], &FisherDiag { h: vec![h], damping: l1 + extra, sample_count: 1 }, 0.1);
            prop_assert!(b[0].abs() <= a[0].abs());
        }
    }
}
