//! Binary checkpoints and state hashes.
//!
//! Layout: `UNLCKPT1`, format version (u32), meta length (u32) + meta JSON,
//! tensor count (u32) and per-tensor `name_len u8, name, ndim u8, dims u32..`,
//! then the body (params, exp_avg, exp_avg_sq as LE f32, step as u64), then
//! a SHA-256 trailer over everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelShape};
use crate::optim::OptState;

pub const MAGIC: &[u8; 8] = b"UNLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub shape: ModelShape,
    /// Logical steps consumed from the WAL, including skipped empty steps.
    pub logical_step: u32,
    pub config_digest: String,
    pub run_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: OptState,
    pub meta: CheckpointMeta,
}

fn params_body(p: &ModelParams) -> Vec<u8> {
    p.to_le_bytes()
}

fn opt_body(o: &OptState) -> Vec<u8> {
    let mut out = o.exp_avg.to_le_bytes();
    out.extend(o.exp_avg_sq.to_le_bytes());
    out.extend(o.step.to_le_bytes());
    out
}

/// Canonical serialization of `(θ, Ω)`.
pub fn state_body(p: &ModelParams, o: &OptState) -> Vec<u8> {
    let mut out = params_body(p);
    out.extend(opt_body(o));
    out
}

pub fn model_hash(p: &ModelParams) -> [u8; 32] {
    Sha256::digest(params_body(p)).into()
}

pub fn opt_hash(o: &OptState) -> [u8; 32] {
    Sha256::digest(opt_body(o)).into()
}

pub fn state_hash(p: &ModelParams, o: &OptState) -> [u8; 32] {
    Sha256::digest(state_body(p, o)).into()
}

fn header(meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut h = Vec::new();
    h.extend_from_slice(MAGIC);
    h.extend(FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    h.extend((json.len() as u32).to_le_bytes());
    h.extend(json);
    let dims = meta.shape.tensor_dims();
    h.extend(((dims.len() * 3) as u32).to_le_bytes());
    for prefix in ["", "exp_avg.", "exp_avg_sq."] {
        for (name, d) in &dims {
            let full = format!("{prefix}{name}");
            h.push(full.len() as u8);
            h.extend(full.as_bytes());
            h.push(d.len() as u8);
            for &x in d {
                h.extend((x as u32).to_le_bytes());
            }
        }
    }
    Ok(h)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, out: &mut [f32]) -> Result<()> {
        let raw = self.take(out.len() * 4)?;
        for (v, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn state_hash(&self) -> [u8; 32] {
        state_hash(&self.params, &self.opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.shape != self.meta.shape {
            return Err(Error::ShapeMismatch("meta shape differs from params".into()));
        }
        let mut out = header(&self.meta)?;
        out.extend(state_body(&self.params, &self.opt));
        let trailer = Sha256::digest(&out);
        out.extend(trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Corruption("checkpoint too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corruption("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != trailer {
            return Err(Error::Corruption("checkpoint trailer mismatch".into()));
        }
        let mut r = Reader { buf: payload, at: 12 };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.shape.validate()?;
        let expect_header = header(&meta)?;
        let n = r.u32()? as usize;
        for _ in 0..n {
            let name_len = r.u8()? as usize;
            r.take(name_len)?;
            let nd = r.u8()? as usize;
            r.take(nd * 4)?;
        }
        if payload[..r.at] != expect_header[..] {
            return Err(Error::Corruption("tensor table disagrees with shape".into()));
        }
        let shape = meta.shape;
        let mut params = ModelParams::zeros(shape);
        let mut opt = OptState::new(shape);
        for t in params.tensors_mut() {
            r.f32s(t)?;
        }
        for t in opt.exp_avg.tensors_mut() {
            r.f32s(t)?;
        }
        for t in opt.exp_avg_sq.tensors_mut() {
            r.f32s(t)?;
        }
        opt.step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if r.at != payload.len() {
            return Err(Error::Corruption("trailing bytes in checkpoint".into()));
        }
        Ok(Self { params, opt, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
