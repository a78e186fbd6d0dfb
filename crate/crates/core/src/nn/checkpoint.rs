//! Versioned binary checkpoint, little-endian.
//!
//! ```text
//! magic "DSCK" | version u8 | dtype u8 (4 or 8)
//! u32 len + network spec JSON
//! u32 len + train spec JSON ("null" when absent)
//! u32 len + caller metadata (opaque UTF-8)
//! u64 parameter count | parameters
//! u8 optimizer flag | [u64 step | first moments | second moments]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::adam::AdamState;
use super::network::{Network, NetworkSpec};
use super::train::TrainSpec;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub train_spec: Option<TrainSpec>,
    pub optimizer: Option<AdamState<T>>,
    pub metadata: String,
}

fn to_json<S: serde::Serialize>(v: &S) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::format(format!("checkpoint JSON: {e}")))
}

fn from_json<S: serde::de::DeserializeOwned>(b: &[u8]) -> Result<S> {
    serde_json::from_slice(b).map_err(|e| Error::format(format!("checkpoint JSON: {e}")))
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::format("value count overflow"))?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

/// Header fields readable without knowing the scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub dtype: u8,
    pub spec: NetworkSpec,
    pub train_spec: Option<TrainSpec>,
    pub metadata: String,
    pub param_count: u64,
}

fn read_header(c: &mut Cursor) -> Result<CheckpointHeader> {
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = c.u8()?;
    let spec = from_json(c.blob()?)?;
    let train_spec = from_json(c.blob()?)?;
    let metadata = String::from_utf8(c.blob()?.to_vec()).map_err(|_| Error::format("metadata is not UTF-8"))?;
    let param_count = c.u64()?;
    Ok(CheckpointHeader {
        dtype,
        spec,
        train_spec,
        metadata,
        param_count,
    })
}

pub fn read_checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    read_header(&mut Cursor { buf: bytes, pos: 0 })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(T::DTYPE);
        put_blob(&mut out, &to_json(self.network.spec())?);
        put_blob(&mut out, &to_json(&self.train_spec)?);
        put_blob(&mut out, self.metadata.as_bytes());
        let params = self.network.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for &p in params {
            p.write_le(&mut out);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                if s.m.len() != params.len() || s.v.len() != params.len() {
                    return Err(Error::shape("optimizer state does not match parameters"));
                }
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                for &v in s.m.iter().chain(&s.v) {
                    v.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        let h = read_header(&mut c)?;
        if h.dtype != T::DTYPE {
            return Err(Error::format(format!(
                "checkpoint holds {}-byte floats, expected {}",
                h.dtype,
                T::DTYPE
            )));
        }
        let n = h.param_count as usize;
        if n != h.spec.param_count() {
            return Err(Error::format(format!(
                "checkpoint has {n} parameters but its spec needs {}",
                h.spec.param_count()
            )));
        }
        let network = Network::from_params(h.spec, c.values(n)?)?;
        let optimizer = match c.u8()? {
            0 => None,
            1 => {
                let step = c.u64()?;
                let m = c.values(n)?;
                let v = c.values(n)?;
                Some(AdamState { m, v, step })
            }
            f => return Err(Error::format(format!("bad optimizer flag {f}"))),
        };
        if c.pos != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Self {
            network,
            train_spec: h.train_spec,
            optimizer,
            metadata: h.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
