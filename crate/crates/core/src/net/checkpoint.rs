//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TFLOWCK\0"
//! version    u32      1
//! desc_len   u32      length of the descriptor
//! descriptor UTF-8 JSON {"arch": ..., "meta": {...}}
//! seed       u64
//! count      u64      number of parameters
//! params     count × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, PointNetLite};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TFLOWCK\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Architecture,
    meta: BTreeMap<String, String>,
}

/// A network plus free-form string metadata (policy kind, scale, ...).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: PointNetLite,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(net: PointNetLite) -> Self {
        Checkpoint {
            net,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_string(&Descriptor {
            arch: self.net.architecture().clone(),
            meta: self.meta.clone(),
        })
        .expect("descriptor serializes");
        let params = self.net.params();
        let mut out = Vec::with_capacity(32 + desc.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.extend_from_slice(&self.net.seed().to_le_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |m: &str| Error::CheckpointMismatch(m.to_string());
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::CheckpointMismatch("truncated checkpoint".into()));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a toolflow checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointMismatch(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let desc: Descriptor = serde_json::from_slice(take(len)?)
            .map_err(|e| Error::CheckpointMismatch(format!("descriptor: {e}")))?;
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let expected = desc.arch.num_params();
        if count != expected {
            return Err(Error::CheckpointMismatch(format!(
                "{count} parameters stored, architecture needs {expected}"
            )));
        }
        let payload = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflows"))?)?;
        if !r.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let net = PointNetLite::from_params(desc.arch, seed, params)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(Checkpoint { net, meta: desc.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored architecture equals `arch`.
    pub fn expect_architecture(&self, arch: &Architecture) -> Result<()> {
        if self.net.architecture() != arch {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint architecture {:?} differs from requested {:?}",
                self.net.architecture(),
                arch
            )));
        }
        Ok(())
    }
}
