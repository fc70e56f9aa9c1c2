//! Binary container for trained parameters.
//!
//! ```text
//! magic "NFB1" | u32 version | u32 n_tensors
//! per tensor: u16 name_len | name | u8 ndim | u32 dims.. | f64 payload
//! u64 json_len | JSON metadata
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const BUNDLE_MAGIC: &[u8; 4] = b"NFB1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    /// What the tensors describe, e.g. `p2a` or `lstm`.
    pub kind: String,
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl ModelBundle {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        ModelBundle {
            kind: kind.into(),
            tensors: Vec::new(),
            metadata,
        }
    }

    /// Appends every parameter of `store`, names prefixed with `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Parameters whose names start with `prefix`, prefix stripped.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                s.add(rest, t.clone());
            }
        }
        s
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("bundle has no tensor {name}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::Data(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Data("tensor rank above 255".into()))?);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Data("tensor dimension above u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&serde_json::json!({
            "kind": self.kind,
            "metadata": self.metadata,
        }))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(Error::format(0, "not a model bundle"));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::format(4, format!("unsupported bundle version {version}")));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format(at as u64, "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let at = r.pos;
        let len = usize::try_from(r.u64()?).map_err(|_| Error::format(at as u64, "metadata length overflow"))?;
        let at = r.pos;
        let json: serde_json::Value =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(at as u64, format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after metadata"));
        }
        let kind = json
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::format(at as u64, "metadata lacks kind"))?
            .to_string();
        Ok(ModelBundle {
            kind,
            tensors,
            metadata: json.get("metadata").cloned().unwrap_or(serde_json::Value::Null),
        })
    }
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
            None => Err(Error::format(self.pos as u64, format!("truncated: need {n} bytes"))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    std::fs::write(path, bundle.encode()?)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::decode(&std::fs::read(path)?)
}
