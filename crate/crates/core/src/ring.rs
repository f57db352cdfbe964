//! Per-step dense delta patches for reverting recent updates.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelShape};
use crate::optim::OptState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// Bitwise XOR of raw f32 bit patterns; self-inverse.
    #[default]
    Xor,
    /// `fl(post - pre)` as f32; inverse is approximate.
    Arith,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Codec {
    #[default]
    Identity,
    /// Alternating `(zero_run u32, literal_len u32, literal bytes)` blocks.
    ZeroRle,
}

impl Codec {
    fn id(self) -> u8 {
        match self {
            Codec::Identity => 0,
            Codec::ZeroRle => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Codec::Identity),
            1 => Ok(Codec::ZeroRle),
            _ => Err(Error::Corruption(format!("unknown codec {id}"))),
        }
    }

    pub fn encode(self, raw: &[u8]) -> Vec<u8> {
        match self {
            Codec::Identity => raw.to_vec(),
            Codec::ZeroRle => {
                let mut out = Vec::new();
                let mut i = 0;
                while i < raw.len() {
                    let z0 = i;
                    while i < raw.len() && raw[i] == 0 {
                        i += 1;
                    }
                    let l0 = i;
                    // a literal run ends at the next stretch of >= 8 zeros
                    while i < raw.len() {
                        if raw[i] == 0 && raw[i..].iter().take(8).all(|&b| b == 0) && raw.len() - i >= 8 {
                            break;
                        }
                        i += 1;
                    }
                    out.extend(((l0 - z0) as u32).to_le_bytes());
                    out.extend(((i - l0) as u32).to_le_bytes());
                    out.extend(&raw[l0..i]);
                }
                out
            }
        }
    }

    pub fn decode(self, data: &[u8], expected_len: usize) -> Result<Vec<u8>> {
        let out = match self {
            Codec::Identity => data.to_vec(),
            Codec::ZeroRle => {
                let mut out = Vec::with_capacity(expected_len);
                let mut i = 0;
                let word = |at: usize| -> Result<usize> {
                    data.get(at..at + 4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                        .ok_or_else(|| Error::Corruption("truncated patch payload".into()))
                };
                while i < data.len() {
                    let zeros = word(i)?;
                    let lits = word(i + 4)?;
                    i += 8;
                    if out.len() + zeros + lits > expected_len || i + lits > data.len() {
                        return Err(Error::Corruption("patch payload overruns tensor".into()));
                    }
                    out.resize(out.len() + zeros, 0);
                    out.extend_from_slice(&data[i..i + lits]);
                    i += lits;
                }
                out
            }
        };
        if out.len() != expected_len {
            return Err(Error::Corruption(format!(
                "decoded patch has {} bytes, expected {expected_len}",
                out.len()
            )));
        }
        Ok(out)
    }
}

fn raw_delta(pre: &[f32], post: &[f32], mode: PatchMode) -> Vec<u8> {
    let mut out = Vec::with_capacity(pre.len() * 4);
    for (a, b) in pre.iter().zip(post) {
        let word = match mode {
            PatchMode::Xor => a.to_bits() ^ b.to_bits(),
            PatchMode::Arith => (b - a).to_bits(),
        };
        out.extend(word.to_le_bytes());
    }
    out
}

/// Undoes a delta in place: `x <- x ^ d` or `x <- x - d`.
fn undo(x: &mut [f32], raw: &[u8], mode: PatchMode) {
    for (v, c) in x.iter_mut().zip(raw.chunks_exact(4)) {
        let d = u32::from_le_bytes(c.try_into().unwrap());
        *v = match mode {
            PatchMode::Xor => f32::from_bits(v.to_bits() ^ d),
            PatchMode::Arith => *v - f32::from_bits(d),
        };
    }
}

fn opt_flat(o: &OptState) -> Vec<f32> {
    let mut v = o.exp_avg.flatten();
    v.extend(o.exp_avg_sq.flatten());
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaPatch {
    /// Logical step whose update this patch undoes.
    pub step: u32,
    pub mode: PatchMode,
    pub codec: Codec,
    pub shape: ModelShape,
    pub params: Vec<u8>,
    pub opt: Option<Vec<u8>>,
    /// Optimizer step counter before the update.
    pub opt_step_before: u64,
    pub pre_compress_bytes: u64,
    pub stored_bytes: u64,
}

pub const PATCH_MAGIC: &[u8; 8] = b"UNLPTCH1";

fn shape_digest(s: &ModelShape) -> [u8; 32] {
    Sha256::digest(serde_json::to_vec(s).expect("shape serializes")).into()
}

impl DeltaPatch {
    pub fn capture(
        pre: (&ModelParams, &OptState),
        post: (&ModelParams, &OptState),
        step: u32,
        mode: PatchMode,
        codec: Codec,
        with_opt: bool,
    ) -> Result<Self> {
        if !pre.0.same_shape(post.0) {
            return Err(Error::ShapeMismatch("pre and post params differ in shape".into()));
        }
        let raw_p = raw_delta(&pre.0.flatten(), &post.0.flatten(), mode);
        let raw_o = with_opt.then(|| raw_delta(&opt_flat(pre.1), &opt_flat(post.1), mode));
        let pre_compress = (raw_p.len() + raw_o.as_ref().map_or(0, Vec::len)) as u64;
        let params = codec.encode(&raw_p);
        let opt = raw_o.map(|r| codec.encode(&r));
        let stored = (params.len() + opt.as_ref().map_or(0, Vec::len)) as u64;
        Ok(Self {
            step,
            mode,
            codec,
            shape: pre.0.shape,
            params,
            opt,
            opt_step_before: pre.1.step,
            pre_compress_bytes: pre_compress,
            stored_bytes: stored,
        })
    }

    /// Applies the inverse of this patch to `(params, opt)` in place.
    pub fn undo(&self, params: &mut ModelParams, opt: &mut OptState) -> Result<()> {
        if params.shape != self.shape {
            return Err(Error::ShapeMismatch("patch shape differs from state".into()));
        }
        let n = params.numel();
        let raw = self.codec.decode(&self.params, n * 4)?;
        let mut flat = params.flatten();
        undo(&mut flat, &raw, self.mode);
        *params = ModelParams::from_flat(self.shape, &flat)?;
        if let Some(enc) = &self.opt {
            let raw = self.codec.decode(enc, 2 * n * 4)?;
            let mut flat = opt_flat(opt);
            undo(&mut flat, &raw, self.mode);
            opt.exp_avg = ModelParams::from_flat(self.shape, &flat[..n])?;
            opt.exp_avg_sq = ModelParams::from_flat(self.shape, &flat[n..])?;
            opt.step = self.opt_step_before;
        }
        Ok(())
    }

    /// Header (magic, step, mode, codec, opt flag, shape digest, counters),
    /// length-prefixed payloads, SHA-256 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = PATCH_MAGIC.to_vec();
        b.extend(self.step.to_le_bytes());
        b.push(matches!(self.mode, PatchMode::Arith) as u8);
        b.push(self.codec.id());
        b.push(self.opt.is_some() as u8);
        let shape = serde_json::to_vec(&self.shape).expect("shape serializes");
        b.extend((shape.len() as u32).to_le_bytes());
        b.extend(&shape);
        b.extend(shape_digest(&self.shape));
        b.extend(self.opt_step_before.to_le_bytes());
        b.extend(self.pre_compress_bytes.to_le_bytes());
        b.extend((self.params.len() as u64).to_le_bytes());
        b.extend(&self.params);
        if let Some(o) = &self.opt {
            b.extend((o.len() as u64).to_le_bytes());
            b.extend(o);
        }
        let t = Sha256::digest(&b);
        b.extend(t);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = || Error::Corruption("malformed patch file".into());
        if bytes.len() < 8 + 32 || &bytes[..8] != PATCH_MAGIC {
            return Err(corrupt());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Corruption("patch trailer mismatch".into()));
        }
        let mut at = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(at..at + n).ok_or_else(corrupt)?;
            at += n;
            Ok(s)
        };
        let step = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mode = if take(1)?[0] == 1 { PatchMode::Arith } else { PatchMode::Xor };
        let codec = Codec::from_id(take(1)?[0])?;
        let has_opt = take(1)?[0] == 1;
        let slen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let shape: ModelShape = serde_json::from_slice(take(slen)?)?;
        if take(32)? != shape_digest(&shape) {
            return Err(Error::Corruption("patch shape digest mismatch".into()));
        }
        let opt_step_before = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let pre_compress_bytes = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let plen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let params = take(plen)?.to_vec();
        let opt = if has_opt {
            let olen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            Some(take(olen)?.to_vec())
        } else {
            None
        };
        let stored_bytes = (params.len() + opt.as_ref().map_or(0, Vec::len)) as u64;
        Ok(Self {
            step,
            mode,
            codec,
            shape,
            params,
            opt,
            opt_step_before,
            pre_compress_bytes,
            stored_bytes,
        })
    }
}

/// Sliding window of the most recent `window` patches.
#[derive(Clone, Debug)]
pub struct RingBuffer {
    pub window: usize,
    pub mode: PatchMode,
    pub codec: Codec,
    pub revert_optimizer: bool,
    patches: VecDeque<DeltaPatch>,
}

impl RingBuffer {
    pub fn new(window: usize, mode: PatchMode, codec: Codec, revert_optimizer: bool) -> Self {
        Self {
            window,
            mode,
            codec,
            revert_optimizer,
            patches: VecDeque::with_capacity(window),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> impl DoubleEndedIterator<Item = &DeltaPatch> + ExactSizeIterator {
        self.patches.iter()
    }

    /// Oldest logical step still revertible.
    pub fn oldest_step(&self) -> Option<u32> {
        self.patches.front().map(|p| p.step)
    }

    pub fn newest_step(&self) -> Option<u32> {
        self.patches.back().map(|p| p.step)
    }

    pub fn push(&mut self, patch: DeltaPatch) {
        if self.window == 0 {
            return;
        }
        if self.patches.len() == self.window {
            self.patches.pop_front();
        }
        self.patches.push_back(patch);
    }

    pub fn capture(
        &mut self,
        pre_params: &ModelParams,
        pre_opt: &OptState,
        post_params: &ModelParams,
        post_opt: &OptState,
        step: u32,
    ) -> Result<()> {
        let p = DeltaPatch::capture(
            (pre_params, pre_opt),
            (post_params, post_opt),
            step,
            self.mode,
            self.codec,
            self.revert_optimizer,
        )?;
        self.push(p);
        Ok(())
    }

    /// State before the newest `u` updates, applying patches newest-first.
    pub fn revert(&self, params: &ModelParams, opt: &OptState, u: usize) -> Result<(ModelParams, OptState)> {
        if u > self.window {
            return Err(Error::WindowExceeded {
                requested: u as u32,
                window: self.window as u32,
            });
        }
        if u > self.patches.len() {
            let missing = self
                .oldest_step()
                .map_or(0, |s| s.saturating_sub(1));
            return Err(Error::PatchGap(missing));
        }
        let (mut p, mut o) = (params.clone(), opt.clone());
        let mut expect: Option<u32> = None;
        for patch in self.patches.iter().rev().take(u) {
            if let Some(e) = expect {
                if patch.step != e {
                    return Err(Error::PatchGap(e));
                }
            }
            patch.undo(&mut p, &mut o)?;
            expect = patch.step.checked_sub(1);
        }
        Ok((p, o))
    }

    /// Drops the newest `u` patches after a revert has been committed.
    pub fn discard_newest(&mut self, u: usize) {
        for _ in 0..u.min(self.patches.len()) {
            self.patches.pop_back();
        }
    }

    pub fn stored_bytes(&self) -> u64 {
        self.patches.iter().map(|p| p.stored_bytes).sum()
    }

    pub fn pre_compress_bytes(&self) -> u64 {
        self.patches.iter().map(|p| p.pre_compress_bytes).sum()
    }
}

/// Distance between two f32 values in units in the last place of `scale`.
pub fn ulps_at_scale(a: f32, b: f32, scale: f32) -> f64 {
    let ulp = ulp(scale.abs());
    ((a as f64) - (b as f64)).abs() / ulp as f64
}

/// Spacing between `x` and the next representable f32 away from zero.
pub fn ulp(x: f32) -> f32 {
    let x = x.abs();
    if !x.is_finite() {
        return f32::NAN;
    }
    f32::from_bits(x.to_bits() + 1) - x
}
