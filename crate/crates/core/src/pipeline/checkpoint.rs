//! Binary checkpoint: `SLCK`, a u32 version, then tagged sections
//! (`u32 tag, u64 length, payload`). All integers little-endian; tensors
//! are three u32 dims followed by f64 values so a restore is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamParams, AdamState};
use crate::tensor::{LatentGrid, Tensor3};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_Z: u32 = 1;
const TAG_M: u32 = 2;
const TAG_V: u32 = 3;
const TAG_SCALARS: u32 = 4;
const TAG_RNG: u32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub iteration: u64,
    pub alpha: f64,
    pub seed: u64,
    pub z: LatentGrid,
    pub m: Tensor3,
    pub v: Tensor3,
    pub adam_t: u64,
}

impl Checkpoint {
    pub fn adam_state(&self, params: AdamParams) -> AdamState {
        AdamState {
            params,
            m: self.m.clone(),
            v: self.v.clone(),
            t: self.adam_t,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (tag, t) in [(TAG_Z, &self.z), (TAG_M, &self.m), (TAG_V, &self.v)] {
            let mut p = Vec::with_capacity(12 + 8 * t.len());
            for d in [t.rows(), t.cols(), t.channels()] {
                p.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.as_slice() {
                p.extend_from_slice(&x.to_le_bytes());
            }
            section(&mut out, tag, &p);
        }
        let mut s = Vec::new();
        s.extend_from_slice(&self.adam_t.to_le_bytes());
        s.extend_from_slice(&self.iteration.to_le_bytes());
        s.extend_from_slice(&self.alpha.to_le_bytes());
        s.extend_from_slice(&self.config_hash.to_le_bytes());
        section(&mut out, TAG_SCALARS, &s);
        section(&mut out, TAG_RNG, &self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::IncompatibleCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let (mut z, mut m, mut v, mut scalars, mut seed) = (None, None, None, None, None);
        while r.pos < bytes.len() {
            let tag = r.u32()?;
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            let mut b = Reader { bytes: body, pos: 0 };
            match tag {
                TAG_Z => z = Some(b.tensor()?),
                TAG_M => m = Some(b.tensor()?),
                TAG_V => v = Some(b.tensor()?),
                TAG_SCALARS => scalars = Some((b.u64()?, b.u64()?, b.f64()?, b.u64()?)),
                TAG_RNG => seed = Some(b.u64()?),
                // Unknown sections from newer writers are skipped.
                _ => {}
            }
        }
        let missing = |n: &str| Error::IncompatibleCheckpoint(format!("missing section {n}"));
        let z = z.ok_or_else(|| missing("z"))?;
        let m = m.ok_or_else(|| missing("m"))?;
        let v = v.ok_or_else(|| missing("v"))?;
        let (adam_t, iteration, alpha, config_hash) = scalars.ok_or_else(|| missing("scalars"))?;
        let seed = seed.ok_or_else(|| missing("rng"))?;
        if !(z.same_dims(&m) && z.same_dims(&v)) {
            return Err(Error::IncompatibleCheckpoint("moment shapes differ from z".into()));
        }
        Ok(Self {
            config_hash,
            iteration,
            alpha,
            seed,
            z,
            m,
            v,
            adam_t,
        })
    }

    /// Writes to a sibling temp file then renames, so a crash never leaves a
    /// torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn section(out: &mut Vec<u8>, tag: u32, payload: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::IncompatibleCheckpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor3> {
        let (r, c, k) = (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        let n = r
            .checked_mul(c)
            .and_then(|x| x.checked_mul(k))
            .ok_or_else(|| Error::IncompatibleCheckpoint("tensor dims overflow".into()))?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::IncompatibleCheckpoint("tensor dims overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor3::from_vec(r, c, k, data)
    }
}
