//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `MMGENCKP`, `u32` version, `u64` length plus
//! JSON metadata object of strings, `u64` parameter count, then per
//! parameter: `u64` length plus UTF-8 name, `u8` frozen flag, `u8` precision
//! (8 = f64), `u32` rank, `u64` dims, `u64` element count, raw values.

use crate::error::{Error, Result};
use crate::nn::ParamBundle;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MMGENCKP";
pub const VERSION: u32 = 1;
const PRECISION_F64: u8 = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamBundle,
}

impl Checkpoint {
    pub fn new(stage: &str, params: ParamBundle) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("stage".to_string(), stage.to_string());
        Self { metadata, params }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn stage(&self) -> &str {
        self.metadata.get("stage").map(String::as_str).unwrap_or("")
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| Error::Compatibility(format!("checkpoint has no `{key}` metadata")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Compatibility(format!("checkpoint metadata `{key}` = `{raw}` is malformed")))
    }

    /// Errors unless the stage tag is one of `allowed`.
    pub fn require_stage(&self, allowed: &[&str]) -> Result<()> {
        if allowed.contains(&self.stage()) {
            Ok(())
        } else {
            Err(Error::Compatibility(format!("checkpoint stage `{}` is not one of {allowed:?}", self.stage())))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.metadata)?.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in self.params.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            out.push(p.frozen as u8);
            out.push(PRECISION_F64);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(p.value.numel() as u64).to_le_bytes());
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::CheckpointFormat("bad magic string".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let meta = r.blob("metadata")?;
        let metadata: BTreeMap<String, String> =
            serde_json::from_slice(meta).map_err(|e| Error::CheckpointFormat(format!("metadata is not a string map: {e}")))?;
        let count = r.u64("parameter count")?;
        let mut params = ParamBundle::new();
        for _ in 0..count {
            let name = String::from_utf8(r.blob("parameter name")?.to_vec()).map_err(|_| Error::CheckpointFormat("parameter name is not UTF-8".into()))?;
            let frozen = r.take(1, "frozen flag")?[0] != 0;
            let precision = r.take(1, "precision")?[0];
            if precision != PRECISION_F64 {
                return Err(Error::CheckpointFormat(format!("unsupported precision tag {precision} for `{name}`")));
            }
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64("dimension")? as usize);
            }
            let n = r.u64("element count")? as usize;
            let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if expected != Some(n) {
                return Err(Error::CheckpointShape { name, reason: format!("dims {dims:?} do not hold {n} elements") });
            }
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CheckpointTruncated(name.clone()))?, "values")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if params.get(&name).is_some() {
                return Err(Error::CheckpointFormat(format!("duplicate parameter `{name}`")));
            }
            let i = params.add(name, Tensor::new(dims, data)?);
            if frozen {
                params.set_frozen_index(i, true);
            }
        }
        if r.at != bytes.len() {
            return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Hash of the serialized container.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(crate::nn::hex(&Sha256::digest(self.to_bytes()?)))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::CheckpointTruncated(what.to_string()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u64(what)?;
        let n = usize::try_from(n).map_err(|_| Error::CheckpointTruncated(what.to_string()))?;
        self.take(n, what)
    }
}
