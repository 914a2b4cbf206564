//! Named tensor maps and their on-disk container.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! [u64 header length N][N bytes of JSON header][data section]
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype":"F64","shape":[..],"data_offsets":[begin,end]}` and may carry a
//! `"__metadata__"` string map. Offsets are relative to the start of the data
//! section and tile it exactly, in header (name) order. This is the
//! safetensors layout restricted to `F64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";
const DTYPE: &str = "F64";
const ELEM: usize = std::mem::size_of::<f64>();

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            tensors: tensors.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Like [`Checkpoint::get`] but with an error naming the missing tensor.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::param(name, "missing"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    /// Checks that `other` holds exactly the same names with the same shapes.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        let missing: Vec<String> = self
            .names()
            .filter(|n| !other.tensors.contains_key(*n))
            .cloned()
            .collect();
        let unexpected: Vec<String> = other
            .names()
            .filter(|n| !self.tensors.contains_key(*n))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::NameSetMismatch {
                missing,
                unexpected,
            });
        }
        for (name, t) in &self.tensors {
            let o = &other.tensors[name];
            if t.shape() != o.shape() {
                return Err(Error::param(
                    name,
                    format!("shape {:?} vs {:?}", t.shape(), o.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Builds a checkpoint with the same names by applying `f` to each tensor.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), f(n, t)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            tensors,
            metadata: BTreeMap::new(),
        })
    }

    /// Data section bytes, in header order.
    pub fn data_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_parameters() * ELEM);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), json!(self.metadata));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = t
                .len()
                .checked_mul(ELEM)
                .and_then(|bytes| offset.checked_add(bytes))
                .ok_or_else(|| Error::TooLarge { name: name.clone() })?;
            header.insert(
                name.clone(),
                json!({ "dtype": DTYPE, "shape": t.shape(), "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        let header = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.data_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader { len: bytes.len() });
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix"));
    let available = bytes.len() - 8;
    let header_len = usize::try_from(declared)
        .ok()
        .filter(|&n| n <= available)
        .ok_or(Error::HeaderTooLarge {
            declared,
            available,
        })?;
    let header: Value = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::MalformedHeader(format!("byte {}: {e}", 8 + e.column())))?;
    let Value::Object(header) = header else {
        return Err(Error::MalformedHeader("header is not a JSON object".into()));
    };
    let data = &bytes[8 + header_len..];

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::with_capacity(header.len());
    for (name, info) in header {
        if name == METADATA_KEY {
            metadata = parse_metadata(info)?;
        } else {
            entries.push(parse_entry(name, &info)?);
        }
    }

    entries.sort_by_key(|e| (e.begin, e.end));
    let mut cursor = 0usize;
    for e in &entries {
        if e.begin < cursor {
            return Err(Error::OverlappingOffsets {
                name: e.name.clone(),
                begin: e.begin,
                end: e.end,
                prev_end: cursor,
            });
        }
        if e.begin > cursor {
            return Err(Error::GappedOffsets {
                begin: cursor,
                end: e.begin,
            });
        }
        if e.end > data.len() {
            return Err(Error::TruncatedData {
                name: e.name.clone(),
                end: e.end,
                len: data.len(),
            });
        }
        cursor = e.end;
    }
    if cursor != data.len() {
        return Err(Error::GappedOffsets {
            begin: cursor,
            end: data.len(),
        });
    }

    let mut tensors = BTreeMap::new();
    for e in entries {
        let values = data[e.begin..e.end]
            .chunks_exact(ELEM)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor =
            Tensor::new(e.shape, values).map_err(|err| Error::param(&e.name, err.to_string()))?;
        tensors.insert(e.name, tensor);
    }
    Ok(Checkpoint { tensors, metadata })
}

fn parse_metadata(info: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = info else {
        return Err(Error::MalformedHeader(
            "__metadata__ is not an object".into(),
        ));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::MalformedHeader(format!(
                "__metadata__.{k} is not a string: {other}"
            ))),
        })
        .collect()
}

fn parse_entry(name: String, info: &Value) -> Result<Entry> {
    let malformed = |what: &str| Error::MalformedHeader(format!("tensor `{name}`: {what}"));
    let dtype = info
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing dtype"))?;
    if dtype != DTYPE {
        return Err(Error::UnsupportedDtype {
            name,
            dtype: dtype.to_string(),
        });
    }
    let shape = info
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing shape"))?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
    let offsets = info
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| {
            let b = usize::try_from(a[0].as_u64()?).ok()?;
            let e = usize::try_from(a[1].as_u64()?).ok()?;
            Some((b, e))
        })
        .ok_or_else(|| malformed("data_offsets must be [begin, end]"))?;
    let (begin, end) = offsets;
    if end < begin {
        return Err(malformed("data_offsets end precedes begin"));
    }
    let expected = shape
        .iter()
        .try_fold(ELEM, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::TooLarge { name: name.clone() })?;
    if end - begin != expected {
        return Err(Error::OffsetSizeMismatch {
            name,
            span: end - begin,
            expected,
        });
    }
    Ok(Entry {
        name,
        shape,
        begin,
        end,
    })
}
