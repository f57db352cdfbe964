//! Toy next-token model: embedding -> dense(tanh) -> dense -> softmax.
//!
//! The input of the first dense layer is the concatenation of the
//! embeddings of the previous `context` tokens. Every reduction loops in a
//! fixed order, so forward and backward passes are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::{op, RngKey};
use crate::tokenizer::{Token, PAD, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub embed_dim: usize,
    pub context: usize,
    pub hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            vocab: VOCAB_SIZE,
            embed_dim: 16,
            context: 8,
            hidden: 32,
        }
    }
}

impl ModelShape {
    pub fn input_dim(&self) -> usize {
        self.context * self.embed_dim
    }

    /// `(name, dims)` for every tensor in declaration order.
    pub fn tensor_dims(&self) -> [(&'static str, Vec<usize>); 5] {
        [
            ("embed", vec![self.vocab, self.embed_dim]),
            ("w1", vec![self.input_dim(), self.hidden]),
            ("b1", vec![self.hidden]),
            ("w2", vec![self.hidden, self.vocab]),
            ("b2", vec![self.vocab]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensor_dims()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed_dim == 0 || self.context == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::InvalidConfig(format!(
                "vocab {} smaller than tokenizer vocab {VOCAB_SIZE}",
                self.vocab
            )));
        }
        Ok(())
    }
}

/// Model parameters. The same container holds gradients and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub embed: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

pub type GradTensors = ModelParams;

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            embed: vec![0.0; shape.vocab * shape.embed_dim],
            w1: vec![0.0; shape.input_dim() * shape.hidden],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden * shape.vocab],
            b2: vec![0.0; shape.vocab],
        }
    }

    /// Uniform fan-in initialization keyed by `seed`; biases start at zero.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut p = Self::zeros(shape);
        let fill = |t: &mut [f32], tensor: u64, scale: f32| {
            for (i, v) in t.iter_mut().enumerate() {
                let u = RngKey::new(seed, tensor, 0, op::PARAM_INIT, i as u32).uniform();
                *v = (2.0 * u - 1.0) * scale;
            }
        };
        fill(&mut p.embed, 0, 0.5);
        fill(&mut p.w1, 1, 1.0 / (shape.input_dim() as f32).sqrt());
        fill(&mut p.w2, 3, 1.0 / (shape.hidden as f32).sqrt());
        p
    }

    pub fn tensors(&self) -> [&[f32]; 5] {
        [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f32]; 5] {
        [
            &mut self.embed,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len())
    }

    /// Elementwise `self += other`, tensor by tensor in declaration order.
    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn div_scalar(&mut self, denom: f32) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v /= denom;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn from_flat(shape: ModelShape, flat: &[f32]) -> Result<Self> {
        let mut p = Self::zeros(shape);
        if flat.len() != p.numel() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} elements, model needs {}",
                flat.len(),
                p.numel()
            )));
        }
        let mut at = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    /// Little-endian raw bytes of all tensors in declaration order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 4);
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max)
    }
}

/// Loss reduction applied per microbatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Stochastic options of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PassOptions {
    /// Dropout probability on the hidden layer; 0 disables it.
    pub dropout: f32,
}

fn context_at(tokens: &[Token], pos: usize, context: usize, out: &mut [Token]) {
    for (c, slot) in out.iter_mut().enumerate() {
        // slot c holds the token at pos - context + c
        let back = context - c;
        *slot = if pos >= back { tokens[pos - back] } else { PAD };
    }
}

struct Scratch {
    ctx: Vec<Token>,
    x: Vec<f32>,
    act: Vec<f32>,
    mask: Vec<f32>,
    hd: Vec<f32>,
    logits: Vec<f32>,
    dh: Vec<f32>,
    dpre: Vec<f32>,
    dx: Vec<f32>,
}

impl Scratch {
    fn new(s: &ModelShape) -> Self {
        Self {
            ctx: vec![PAD; s.context],
            x: vec![0.0; s.input_dim()],
            act: vec![0.0; s.hidden],
            mask: vec![1.0; s.hidden],
            hd: vec![0.0; s.hidden],
            logits: vec![0.0; s.vocab],
            dh: vec![0.0; s.hidden],
            dpre: vec![0.0; s.hidden],
            dx: vec![0.0; s.input_dim()],
        }
    }
}

/// Hidden activations and logits for one context window.
fn forward_position(p: &ModelParams, sc: &mut Scratch, keys: Option<(u64, u64, u32)>, dropout: f32) {
    let s = p.shape;
    let (d, h, v) = (s.embed_dim, s.hidden, s.vocab);
    for (c, &tok) in sc.ctx.iter().enumerate() {
        let row = tok as usize * d;
        sc.x[c * d..(c + 1) * d].copy_from_slice(&p.embed[row..row + d]);
    }
    sc.act.copy_from_slice(&p.b1);
    for (i, &xi) in sc.x.iter().enumerate() {
        let row = &p.w1[i * h..(i + 1) * h];
        for (a, &w) in sc.act.iter_mut().zip(row) {
            *a += xi * w;
        }
    }
    for a in sc.act.iter_mut() {
        *a = a.tanh();
    }
    match keys {
        Some((seed64, example_id, token_idx)) if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            for (k, m) in sc.mask.iter_mut().enumerate() {
                let u = RngKey::new(seed64, example_id, token_idx, op::DROPOUT, k as u32).uniform();
                *m = if u >= dropout { keep } else { 0.0 };
            }
        }
        _ => sc.mask.iter_mut().for_each(|m| *m = 1.0),
    }
    for ((o, &a), &m) in sc.hd.iter_mut().zip(&sc.act).zip(&sc.mask) {
        *o = a * m;
    }
    sc.logits.copy_from_slice(&p.b2);
    for (j, &hj) in sc.hd.iter().enumerate() {
        let row = &p.w2[j * v..(j + 1) * v];
        for (l, &w) in sc.logits.iter_mut().zip(row) {
            *l += hj * w;
        }
    }
}

/// Turns `logits` into probabilities in place and returns `-log p(target)`.
fn softmax_nll(logits: &mut [f32], target: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    let nll = sum.ln() - logits[target].ln();
    for l in logits.iter_mut() {
        *l /= sum;
    }
    nll
}

/// Runs one example, returning its summed token loss (f64 accumulation of f32
/// per-token losses in position order). When `grad` is given, the example's
/// gradient is accumulated into it.
fn example_pass(
    p: &ModelParams,
    tokens: &[Token],
    example_id: u64,
    seed64: u64,
    opts: PassOptions,
    mut grad: Option<&mut ModelParams>,
) -> f64 {
    let s = p.shape;
    let (d, h, v) = (s.embed_dim, s.hidden, s.vocab);
    let mut sc = Scratch::new(&s);
    let mut loss = 0.0f64;
    for pos in 1..tokens.len() {
        context_at(tokens, pos, s.context, &mut sc.ctx);
        forward_position(p, &mut sc, Some((seed64, example_id, pos as u32)), opts.dropout);
        let target = tokens[pos] as usize;
        loss += softmax_nll(&mut sc.logits, target) as f64;

        let Some(g) = grad.as_deref_mut() else { continue };
        // dlogits = softmax - onehot, kept in sc.logits
        sc.logits[target] -= 1.0;
        for (gb, &dl) in g.b2.iter_mut().zip(&sc.logits) {
            *gb += dl;
        }
        for j in 0..h {
            let hj = sc.hd[j];
            let grow = &mut g.w2[j * v..(j + 1) * v];
            for (gw, &dl) in grow.iter_mut().zip(&sc.logits) {
                *gw += hj * dl;
            }
            let wrow = &p.w2[j * v..(j + 1) * v];
            let mut acc = 0.0f32;
            for (&w, &dl) in wrow.iter().zip(&sc.logits) {
                acc += w * dl;
            }
            sc.dh[j] = acc;
        }
        for k in 0..h {
            let a = sc.act[k];
            sc.dpre[k] = sc.dh[k] * sc.mask[k] * (1.0 - a * a);
        }
        for (gb, &dp) in g.b1.iter_mut().zip(&sc.dpre) {
            *gb += dp;
        }
        for (i, &xi) in sc.x.iter().enumerate() {
            let grow = &mut g.w1[i * h..(i + 1) * h];
            for (gw, &dp) in grow.iter_mut().zip(&sc.dpre) {
                *gw += xi * dp;
            }
            let wrow = &p.w1[i * h..(i + 1) * h];
            let mut acc = 0.0f32;
            for (&w, &dp) in wrow.iter().zip(&sc.dpre) {
                acc += w * dp;
            }
            sc.dx[i] = acc;
        }
        for (c, &tok) in sc.ctx.iter().enumerate() {
            let row = tok as usize * d;
            let ge = &mut g.embed[row..row + d];
            for (e, &dx) in ge.iter_mut().zip(&sc.dx[c * d..(c + 1) * d]) {
                *e += dx;
            }
        }
    }
    loss
}

/// Summed token loss of a microbatch and the per-example losses.
///
/// The total is the sequential f64 sum of per-example losses in id order.
pub fn forward_loss_sum(p: &ModelParams, corpus: &Corpus, ids: &[u64]) -> Result<(f64, Vec<f64>)> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("microbatch"));
    }
    let mut per_example = Vec::with_capacity(ids.len());
    let mut total = 0.0f64;
    for &id in ids {
        let l = example_pass(p, corpus.tokens(id)?, id, 0, PassOptions::default(), None);
        per_example.push(l);
        total += l;
    }
    Ok((total, per_example))
}

/// Gradient of one example's summed token loss.
pub fn example_grad(
    p: &ModelParams,
    corpus: &Corpus,
    id: u64,
    seed64: u64,
    opts: PassOptions,
) -> Result<(GradTensors, f64)> {
    let mut g = ModelParams::zeros(p.shape);
    let loss = example_pass(p, corpus.tokens(id)?, id, seed64, opts, Some(&mut g));
    Ok((g, loss))
}

/// Sum-reduction microbatch gradient: per-example gradients added in order
/// onto a zero buffer, so dropping an example drops exactly its addend.
pub fn grad(
    p: &ModelParams,
    corpus: &Corpus,
    ids: &[u64],
    seed64: u64,
    opts: PassOptions,
) -> Result<GradTensors> {
    grad_with_loss(p, corpus, ids, seed64, opts).map(|(g, _)| g)
}

pub fn grad_with_loss(
    p: &ModelParams,
    corpus: &Corpus,
    ids: &[u64],
    seed64: u64,
    opts: PassOptions,
) -> Result<(GradTensors, f64)> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("microbatch"));
    }
    let mut total = ModelParams::zeros(p.shape);
    let mut loss = 0.0f64;
    for &id in ids {
        let (g, l) = example_grad(p, corpus, id, seed64, opts)?;
        total.add_assign(&g);
        loss += l;
    }
    if !total.is_finite() {
        return Err(Error::NumericFault(format!(
            "non-finite gradient for microbatch starting at id {}",
            ids[0]
        )));
    }
    Ok((total, loss))
}

/// Log-probabilities of the next token given the tokens seen so far.
pub fn next_token_logprobs(p: &ModelParams, history: &[Token]) -> Vec<f32> {
    let s = p.shape;
    let mut sc = Scratch::new(&s);
    let mut padded = history.to_vec();
    padded.push(PAD);
    context_at(&padded, history.len(), s.context, &mut sc.ctx);
    forward_position(p, &mut sc, None, 0.0);
    let max = sc.logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for &l in &sc.logits {
        sum += (l - max).exp();
    }
    let lse = sum.ln();
    sc.logits.iter().map(|&l| l - max - lse).collect()
}

/// Per-position negative log-likelihoods of `tokens[1..]` (deterministic, no dropout).
pub fn token_nlls(p: &ModelParams, tokens: &[Token]) -> Vec<f32> {
    let s = p.shape;
    let mut sc = Scratch::new(&s);
    let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
    for pos in 1..tokens.len() {
        context_at(tokens, pos, s.context, &mut sc.ctx);
        forward_position(p, &mut sc, None, 0.0);
        out.push(softmax_nll(&mut sc.logits, tokens[pos] as usize));
    }
    out
}

/// Greedy decoding of `n` byte tokens after `prefix`.
pub fn greedy_decode(p: &ModelParams, prefix: &[Token], n: usize) -> Vec<Token> {
    let mut history = prefix.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let lp = next_token_logprobs(p, &history);
        let mut best = 0usize;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        let tok = best as Token;
        out.push(tok);
        history.push(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;
    use crate::tokenizer::BOS;

    fn tiny_shape() -> ModelShape {
        ModelShape {
            embed_dim: 4,
            context: 3,
            hidden: 6,
            ..ModelShape::default()
        }
    }

    fn corpus() -> Corpus {
        Corpus::new(vec![
            Sample { id: 1, text: "abcab".into() },
            Sample { id: 2, text: "hello".into() },
            Sample { id: 3, text: "zz top".into() },
        ])
        .unwrap()
    }

    #[test]
    fn context_left_pads() {
        let toks = [BOS, 10, 11, 12];
        let mut ctx = [0; 3];
        context_at(&toks, 1, 3, &mut ctx);
        assert_eq!(ctx, [PAD, PAD, BOS]);
        context_at(&toks, 3, 3, &mut ctx);
        assert_eq!(ctx, [BOS, 10, 11]);
    }

    #[test]
    fn flat_round_trip_and_shape() {
        let p = ModelParams::init(tiny_shape(), 5);
        assert_eq!(p.numel(), tiny_shape().param_count());
        let back = ModelParams::from_flat(p.shape, &p.flatten()).unwrap();
        assert!(back.bit_eq(&p));
        assert!(ModelParams::from_flat(p.shape, &[0.0; 3]).is_err());
    }

    #[test]
    fn loss_total_is_ordered_sum() {
        let p = ModelParams::init(tiny_shape(), 1);
        let (total, per) = forward_loss_sum(&p, &corpus(), &[1, 2, 3]).unwrap();
        let mut acc = 0.0f64;
        for l in &per {
            acc += l;
        }
        assert_eq!(total.to_bits(), acc.to_bits());
    }

    #[test]
    fn empty_microbatch_rejected() {
        let p = ModelParams::init(tiny_shape(), 1);
        assert!(forward_loss_sum(&p, &corpus(), &[]).is_err());
        assert!(grad(&p, &corpus(), &[], 0, PassOptions::default()).is_err());
        assert!(matches!(
            forward_loss_sum(&p, &corpus(), &[99]),
            Err(Error::MissingSample(99))
        ));
    }

    #[test]
    fn nonfinite_gradient_fails_closed() {
        let mut p = ModelParams::init(tiny_shape(), 1);
        p.w2[0] = f32::NAN;
        assert!(matches!(
            grad(&p, &corpus(), &[1], 0, PassOptions::default()),
            Err(Error::NumericFault(_))
        ));
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut p = ModelParams::init(tiny_shape(), 2);
        p.w2.iter_mut().for_each(|v| *v = 0.0);
        let lp = next_token_logprobs(&p, &[BOS, 97]);
        let expect = -(p.shape.vocab as f32).ln();
        for v in lp {
            assert!((v - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_mask_depends_on_example_not_batch() {
        let p = ModelParams::init(tiny_shape(), 3);
        let c = corpus();
        let opts = PassOptions { dropout: 0.3 };
        let (alone, _) = example_grad(&p, &c, 2, 77, opts).unwrap();
        let with_neighbors = grad(&p, &c, &[2], 77, opts).unwrap();
        assert!(alone.bit_eq(&with_neighbors));
        let (other_seed, _) = example_grad(&p, &c, 2, 78, opts).unwrap();
        assert!(!alone.bit_eq(&other_seed));
    }

    #[test]
    fn loss_is_additive_over_examples() {
        let p = ModelParams::init(tiny_shape(), 4);
        let c = corpus();
        let (a, _) = forward_loss_sum(&p, &c, &[1, 2]).unwrap();
        let (b, _) = forward_loss_sum(&p, &c, &[3]).unwrap();
        let (ab, _) = forward_loss_sum(&p, &c, &[1, 2, 3]).unwrap();
        assert_eq!(ab.to_bits(), (a + b).to_bits());
        let (one, _) = forward_loss_sum(&p, &c, &[2]).unwrap();
        let (three, _) = forward_loss_sum(&p, &c, &[2, 2, 2]).unwrap();
        assert_eq!(three.to_bits(), (one + one + one).to_bits());
    }

    #[test]
    fn gradient_is_deterministic() {
        let p = ModelParams::init(tiny_shape(), 4);
        let c = corpus();
        let a = grad(&p, &c, &[3, 1], 9, PassOptions::default()).unwrap();
        let b = grad(&p, &c, &[3, 1], 9, PassOptions::default()).unwrap();
        assert!(a.bit_eq(&b));
    }

    /// Independent f64 forward pass over a flat parameter vector.
    fn reference_loss(shape: ModelShape, flat: &[f64], docs: &[&[Token]]) -> f64 {
        let (v, d, c, h) = (shape.vocab, shape.embed_dim, shape.context, shape.hidden);
        let (embed, rest) = flat.split_at(v * d);
        let (w1, rest) = rest.split_at(c * d * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * v);
        let mut total = 0.0;
        for toks in docs {
            for pos in 1..toks.len() {
                let mut x = vec![0.0; c * d];
                for slot in 0..c {
                    let back = c - slot;
                    let tok = if pos >= back { toks[pos - back] } else { PAD } as usize;
                    x[slot * d..(slot + 1) * d].copy_from_slice(&embed[tok * d..(tok + 1) * d]);
                }
                let hid: Vec<f64> = (0..h)
                    .map(|k| (b1[k] + (0..c * d).map(|i| x[i] * w1[i * h + k]).sum::<f64>()).tanh())
                    .collect();
                let logits: Vec<f64> = (0..v)
                    .map(|j| b2[j] + (0..h).map(|k| hid[k] * w2[k * v + j]).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                total += lse - logits[toks[pos] as usize];
            }
        }
        total
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Central differences of an independent f64 forward pass; at least
        // 100 coordinates per tensor (all of them for smaller tensors).
        let p = ModelParams::init(tiny_shape(), 6);
        let c = corpus();
        let ids = [1, 2, 3];
        let docs: Vec<&[Token]> = ids.iter().map(|&i| c.tokens(i).unwrap()).collect();
        let g = grad(&p, &c, &ids, 0, PassOptions::default()).unwrap();
        let gflat = g.flatten();
        let base: Vec<f64> = p.flatten().iter().map(|&x| x as f64).collect();
        let mut stream = crate::rng::CounterStream::new(11, 0, 0);
        let mut at = 0;
        let mut checked = 0;
        for t in p.tensors() {
            let len = t.len();
            let picks: Vec<usize> = if len <= 100 {
                (0..len).collect()
            } else {
                (0..100).map(|_| stream.below(len as u64) as usize).collect()
            };
            for k in picks {
                let i = at + k;
                let h = 1e-5;
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let fd = (reference_loss(p.shape, &plus, &docs) - reference_loss(p.shape, &minus, &docs)) / (2.0 * h);
                let an = gflat[i] as f64;
                let scale = an.abs().max(fd.abs()).max(1e-4);
                assert!((an - fd).abs() / scale <= 1e-2, "coord {i}: analytic {an} vs fd {fd}");
                checked += 1;
            }
            at += len;
        }
        assert!(checked >= 300);
    }
}
