//! Binary tensor container shared by model checkpoints, mel caches and
//! dataset shards.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVER" | version: u32 | count: u32 | count × entry
//! entry = name_len: u32 | name: UTF-8 | rank: u32 | dims: rank × u32 | tag: u8 | payload
//! ```
//!
//! Tag 0 is `f32` with `prod(dims)` values. Tag 1 is raw bytes (rank 1), used
//! for the JSON metadata entry. Bytes after the last entry make the file
//! corrupt.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"AVER";
pub const FORMAT_VERSION: u32 = 1;
pub const TAG_F32: u8 = 0;
pub const TAG_BYTES: u8 = 1;
/// Name of the JSON metadata entry.
pub const META: &str = "__meta__";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint has no entry named {0}")]
    Missing(String),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor),
    Bytes(Vec<u8>),
}

/// Ordered list of named entries; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Payload)>,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, payload: Payload) {
        assert!(self.get(&name).is_none(), "duplicate checkpoint entry {name}");
        self.entries.push((name, payload));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.push(name.into(), Payload::F32(t));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.push(name.into(), Payload::Bytes(bytes));
    }

    pub fn entries(&self) -> &[(String, Payload)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Payload::F32(t)) => Ok(t),
            Some(Payload::Bytes(_)) => Err(corrupt(format!("entry {name} is not a tensor"))),
            None => Err(CheckpointError::Missing(name.into())),
        }
    }

    /// All `f32` entries as a parameter store, in file order. The trainable
    /// flag is not persisted; models restore it when rebuilding.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, p) in &self.entries {
            if let Payload::F32(t) = p {
                store.add(name.clone(), t.clone(), true);
            }
        }
        store
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let mut ck = Self::new();
        for e in store.entries() {
            ck.push_tensor(e.name.clone(), e.value.clone());
        }
        ck
    }

    pub fn set_meta<M: Serialize>(&mut self, meta: &M) -> Result<()> {
        let bytes = serde_json::to_vec(meta)?;
        self.entries.retain(|(n, _)| n != META);
        self.entries.insert(0, (META.into(), Payload::Bytes(bytes)));
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        match self.get(META) {
            Some(Payload::Bytes(b)) => Ok(serde_json::from_slice(b)?),
            Some(Payload::F32(_)) => Err(corrupt("metadata entry is not a byte entry")),
            None => Err(CheckpointError::Missing(META.into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match payload {
                Payload::F32(t) => {
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    out.push(TAG_F32);
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(b) => {
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    out.push(TAG_BYTES);
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("bad magic, expected AVER"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("tensor count")?;
        let mut ck = Self::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| corrupt(format!("entry {i} has a non-UTF-8 name")))?
                .to_string();
            if ck.get(&name).is_some() {
                return Err(corrupt(format!("duplicate entry {name}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("entry {name} is too large")))?;
            let tag = r.take(1, "dtype tag")?[0];
            let payload = match tag {
                TAG_F32 => {
                    let bytes = r.take(n.checked_mul(4).ok_or_else(|| corrupt("entry too large"))?, "values")?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Payload::F32(Tensor::new(dims, data).map_err(|e| corrupt(e.to_string()))?)
                }
                TAG_BYTES if rank == 1 => Payload::Bytes(r.take(n, "bytes")?.to_vec()),
                _ => return Err(corrupt(format!("entry {name} has unknown dtype tag {tag} for rank {rank}"))),
            };
            ck.entries.push((name, payload));
        }
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes after the last entry", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("aver.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&buf)
    }
}
