//! Binary checkpoints: policy parameters plus the optional trainer state
//! needed to resume a run bit-for-bit.
//!
//! Layout (little-endian): magic `RLVRCKPT`, format version `u32`, flags
//! `u32`, dims `V, d, W` as `u64`, then every parameter as `f64`. With the
//! state flag set, the step counter, the optimizer moments and the frozen
//! reference parameters follow.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::policy::{PolicyDims, PolicyParams};
use crate::trainer::AdamW;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RLVRCKPT";
const VERSION: u32 = 1;
const HAS_STATE: u32 = 1;

/// Everything besides the live parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Completed rollout steps.
    pub step: u64,
    pub optimizer: AdamW,
    pub reference: PolicyParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub state: Option<TrainerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in usize".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(if self.state.is_some() { HAS_STATE } else { 0 });
        let dims = self.params.dims();
        for x in [dims.vocab, dims.embed, dims.window] {
            w.u64(x as u64);
        }
        w.f64s(self.params.as_slice());
        if let Some(s) = &self.state {
            w.u64(s.step);
            w.u64(s.optimizer.t);
            w.f64s(&s.optimizer.m);
            w.f64s(&s.optimizer.v);
            w.f64s(s.reference.as_slice());
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let flags = r.u32()?;
        let dims = PolicyDims::new(r.usize()?, r.usize()?, r.usize()?)
            .map_err(|e| Error::Checkpoint(format!("bad dims: {e}")))?;
        let n = dims.num_params();
        let params = PolicyParams::from_raw(dims, r.f64s(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let state = if flags & HAS_STATE != 0 {
            let step = r.u64()?;
            let t = r.u64()?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            let reference = PolicyParams::from_raw(dims, r.f64s(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            Some(TrainerState { step, optimizer: AdamW { t, m, v }, reference })
        } else {
            None
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { params, state })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
