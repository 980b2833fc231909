//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DSIMCKPT" | u32 version | u64 manifest length | manifest JSON
//!             | u64 value count | f64 values | sha256 of everything before
//! ```
//!
//! The manifest lists the network widths and every parameter tensor (name,
//! group, shape) in store order; the values follow in the same order. Values
//! are stored as raw bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{NetConfig, ParamGroup, ParamId, Policy};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSIMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub net: NetConfig,
    /// Completed update steps when the checkpoint was taken.
    pub iteration: usize,
    pub params: Vec<ParamEntry>,
    /// Free-form annotations such as the validation score.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, iteration: usize) -> Self {
        let mut params = Vec::new();
        let mut values = Vec::new();
        for p in policy.store.params() {
            params.push(ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            });
            values.extend_from_slice(p.value.data());
        }
        Self {
            manifest: Manifest {
                net: policy.cfg,
                iteration,
                params,
                notes: BTreeMap::new(),
            },
            values,
        }
    }

    /// Rebuilds the policy. Parameter names, groups and shapes must match the
    /// layout implied by the stored network widths.
    pub fn to_policy(&self) -> Result<Policy> {
        let mut policy = Policy::new(self.manifest.net, &mut ChaCha8Rng::seed_from_u64(0));
        if policy.store.len() != self.manifest.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter tensors, network expects {}",
                self.manifest.params.len(),
                policy.store.len()
            )));
        }
        let mut offset = 0;
        for (k, entry) in self.manifest.params.iter().enumerate() {
            let p = &policy.store.params()[k];
            if p.name != entry.name || p.group != entry.group || p.value.shape() != entry.shape {
                return Err(Error::Format(format!(
                    "parameter {k}: checkpoint has {} {:?}, network expects {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let src = self
                .values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Format("checkpoint values truncated".into()))?;
            policy.store.get_mut(ParamId(k)).data_mut().copy_from_slice(src);
            offset += n;
        }
        if offset != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, layout uses {offset}",
                self.values.len()
            )));
        }
        Ok(policy)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(8 + 4 + 16 + manifest.len() + 8 * self.values.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing DSIMCKPT header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("hash mismatch"));
        }
        let mut cur = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(cur..cur + n).ok_or_else(|| bad("truncated"))?;
            cur += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let manifest: Manifest = serde_json::from_slice(take(mlen)?)?;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(count.checked_mul(8).ok_or_else(|| bad("value count overflow"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if cur != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { manifest, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
