//! Little-endian binary checkpoint container.
//!
//! Layout: 8-byte magic `PATRNNCK`, `u32` format version, `u32`-prefixed
//! UTF-8 config text, `u64` epoch, `f64` best metric, `u64` optimiser step,
//! `u32` record count, then records of (`u32`-prefixed name, `u32` rank,
//! `u64` dims, raw `f64` payload), and a trailing SHA-256 of everything
//! before it. Optimiser moments are stored as records named `adam.m.<param>`
//! and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use patternrnn_autodiff::{ParameterStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"PATRNNCK";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Flat `key = value` snapshot of the run configuration.
    pub config: String,
    pub epoch: u64,
    pub best_metric: f64,
    pub params: ParameterStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());

        let mut records: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (name, t) in self.params.iter() {
            records.push((name.clone(), t.shape().to_vec(), t.data()));
        }
        for (prefix, moments) in [(MOMENT_M, &self.adam.m), (MOMENT_V, &self.adam.v)] {
            for (name, data) in moments {
                records.push((format!("{prefix}{name}"), vec![data.len()], data));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, shape, data) in records {
            put_str(&mut out, &name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(corrupt("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch, file is truncated or corrupted"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config = r.string()?;
        let epoch = r.u64()?;
        let best_metric = f64::from_bits(r.u64()?);
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                m.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                v.insert(p.to_string(), data);
            } else {
                params.insert(name, Tensor::new(shape, data)?)?;
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after the last record"));
        }
        for (name, moments) in m.iter().chain(v.iter()) {
            match params.get(name) {
                Some(t) if t.numel() == moments.len() => {}
                _ => return Err(Error::Checkpoint(format!("unknown parameter {name} in optimiser state"))),
            }
        }
        Ok(Self {
            config,
            epoch,
            best_metric,
            params,
            adam: AdamState { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 in name".into()))
    }
}
