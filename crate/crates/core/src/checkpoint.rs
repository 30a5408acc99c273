//! Tensor container file.
//!
//! Layout: a UTF-8 text header followed by raw little-endian buffers.
//!
//! ```text
//! ABSA-CHECKPOINT 1
//! meta <key> <json value>
//! tensor <name> <dtype> <offset> <nbytes> <ndim> <dim0> <dim1> ...
//! end
//! <data section>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line. Names and
//! meta keys contain no whitespace. Reading and rewriting a file reproduces
//! it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{AbsaError, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &str = "ABSA-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamStore<T>,
}

impl<T: Element> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: ParamStore::new(),
        }
    }
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(AbsaError::Format(format!(
            "{kind} name {name:?} must be non-empty and contain no whitespace"
        )));
    }
    Ok(())
}

impl<T: Element> Checkpoint<T> {
    pub fn new(tensors: ParamStore<T>) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn with_meta(mut self, key: &str, value: &impl serde::Serialize) -> Result<Self> {
        self.meta.insert(key.to_string(), serde_json::to_string(value)?);
        Ok(self)
    }

    pub fn meta_value<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| AbsaError::Lookup(format!("meta:{key}")))?;
        Ok(serde_json::from_str(raw)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            check_name("meta", k)?;
            if v.contains('\n') {
                return Err(AbsaError::Format(format!("meta {k} spans multiple lines")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.tensors.iter() {
            check_name("tensor", name)?;
            let nbytes = t.numel() * T::DTYPE.size();
            header.push_str(&format!(
                "tensor {name} {} {offset} {nbytes} {}",
                T::DTYPE.name(),
                t.ndim()
            ));
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
            offset += nbytes;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in self.tensors.iter() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| AbsaError::Format("truncated header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| AbsaError::Format("header is not UTF-8".into()))
        };
        let first = next_line()?;
        if first != format!("{MAGIC} {VERSION}") {
            return Err(AbsaError::Format(format!("unrecognized header {first:?}")));
        }
        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, DType, usize, usize, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| AbsaError::Format(format!("bad meta line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let bad = || AbsaError::Format(format!("bad tensor line {line:?}"));
                if f.len() < 5 {
                    return Err(bad());
                }
                let dtype = DType::parse(f[1]).ok_or_else(bad)?;
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
                let (offset, nbytes, ndim) = (num(f[2])?, num(f[3])?, num(f[4])?);
                if f.len() != 5 + ndim {
                    return Err(bad());
                }
                let shape = f[5..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
                if shape.iter().product::<usize>() * dtype.size() != nbytes {
                    return Err(bad());
                }
                entries.push((f[0].to_string(), dtype, offset, nbytes, shape));
            } else {
                return Err(AbsaError::Format(format!("unexpected header line {line:?}")));
            }
        }
        let data = &bytes[pos..];
        let mut tensors = ParamStore::new();
        for (name, dtype, offset, nbytes, shape) in entries {
            let buf = data
                .get(offset..offset + nbytes)
                .ok_or_else(|| AbsaError::Format(format!("tensor {name} overruns the data section")))?;
            let values: Vec<T> = match dtype {
                DType::F32 => buf
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => buf.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
            };
            tensors.insert(name, Tensor::new(shape, values)?);
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| AbsaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| AbsaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
