//! Checkpoint storage for named collections of dense `f32` tensors.
//!
//! The on-disk layout is the safetensors container restricted to `F32`:
//!
//! ```text
//! [u64 LE header length H][H bytes JSON header][data region]
//! ```
//!
//! The header maps every tensor name to
//! `{"dtype":"F32","shape":[..],"data_offsets":[begin,end]}` with offsets
//! relative to the start of the data region. Tensors are written in
//! lexicographic name order and the header is padded with spaces to an
//! 8-byte boundary, so saving the same map twice gives identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// A dense row-major tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidInput(format!(
                "size mismatch: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, rejecting empty or duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidInput("tensor name must be non-empty".into()));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Checks the map-level invariants: non-empty and every element finite.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyMap);
        }
        for (name, t) in &self.entries {
            if !t.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    /// Builds a new map with the same structure by combining `self` and
    /// `other` tensor-by-tensor. Callers must check compatibility first.
    pub(crate) fn zip_map<F>(&self, other: &TensorMap, mut f: F) -> TensorMap
    where
        F: FnMut(&[f32], &[f32], &mut Vec<f32>),
    {
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((name, a), (_, b))| {
                let mut out = Vec::with_capacity(a.numel());
                f(&a.data, &b.data, &mut out);
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data: out,
                    },
                )
            })
            .collect();
        TensorMap { entries }
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    /// Later duplicates overwrite earlier ones; use [`TensorMap::insert`] for
    /// checked construction.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Structural differences between two tensor maps.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompatReport {
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
    pub shape_mismatches: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl CompatReport {
    pub fn is_empty(&self) -> bool {
        self.missing_in_a.is_empty()
            && self.missing_in_b.is_empty()
            && self.shape_mismatches.is_empty()
    }

    /// Converts a non-empty report into an error.
    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(self))
        }
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return writeln!(f, "compatible");
        }
        for name in &self.missing_in_a {
            writeln!(f, "  missing in a: {name}")?;
        }
        for name in &self.missing_in_b {
            writeln!(f, "  missing in b: {name}")?;
        }
        for (name, sa, sb) in &self.shape_mismatches {
            writeln!(f, "  shape mismatch: {name} {sa:?} vs {sb:?}")?;
        }
        Ok(())
    }
}

/// Compares the name sets and per-name shapes of two maps.
pub fn check_compat(a: &TensorMap, b: &TensorMap) -> CompatReport {
    let mut report = CompatReport::default();
    for (name, ta) in &a.entries {
        match b.entries.get(name) {
            None => report.missing_in_b.push(name.clone()),
            Some(tb) if ta.shape != tb.shape => {
                report
                    .shape_mismatches
                    .push((name.clone(), ta.shape.clone(), tb.shape.clone()));
            }
            Some(_) => {}
        }
    }
    for name in b.entries.keys() {
        if !a.entries.contains_key(name) {
            report.missing_in_a.push(name.clone());
        }
    }
    report
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header entries in file order. Deserialized by hand so duplicate keys are
/// reported instead of silently collapsed.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> std::result::Result<RawHeader, M::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// Serializes a map into the checkpoint byte layout.
pub fn to_bytes(map: &TensorMap) -> Result<Vec<u8>> {
    map.validate()?;

    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for (name, t) in &map.entries {
        let end = offset + t.numel() * 4;
        let entry = HeaderEntry {
            dtype: "F32".into(),
            shape: t.shape.clone(),
            data_offsets: [offset, end],
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))?;
    let pad = (8 - (8 + header_bytes.len()) % 8) % 8;
    header_bytes.extend(std::iter::repeat_n(b' ', pad));

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in map.entries.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the checkpoint byte layout, validating every header entry.
pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated: file shorter than the 8-byte header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let rest = (bytes.len() - 8) as u64;
    if header_len > rest {
        return Err(Error::Format(format!(
            "truncated: header length {header_len} exceeds remaining file size {rest}"
        )));
    }
    let header_len = header_len as usize;
    let header_str = std::str::from_utf8(&bytes[8..8 + header_len])
        .map_err(|e| Error::Format(format!("bad header: not UTF-8 ({e})")))?;
    let raw: RawHeader = serde_json::from_str(header_str)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let data = &bytes[8 + header_len..];

    let mut map = TensorMap::new();
    let mut spans = Vec::with_capacity(raw.0.len());
    for (name, value) in raw.0 {
        if name == "__metadata__" {
            continue;
        }
        if map.entries.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("bad header entry `{name}`: {e}")))?;
        if entry.dtype != "F32" {
            return Err(Error::Format(format!(
                "unsupported element type `{}` for `{name}`",
                entry.dtype
            )));
        }
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(Error::Format(format!("bad offsets for `{name}`: {begin} > {end}")));
        }
        let numel: usize = entry.shape.iter().product();
        if end - begin != numel * 4 || entry.shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!(
                "size mismatch for `{name}`: shape {:?} needs {} bytes, offsets span {}",
                entry.shape,
                numel * 4,
                end - begin
            )));
        }
        if end > data.len() {
            return Err(Error::Format(format!(
                "truncated: `{name}` ends at byte {end} but data region has {} bytes",
                data.len()
            )));
        }
        let values: Vec<f32> = data[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor {
            shape: entry.shape,
            data: values,
        };
        if !tensor.is_finite() {
            return Err(Error::NonFinite(name));
        }
        spans.push((begin, end));
        map.entries.insert(name, tensor);
    }
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }

    spans.sort_unstable();
    let mut cursor = 0;
    for (begin, end) in spans {
        if begin != cursor {
            return Err(Error::Format(format!(
                "data region has a gap or overlap at byte {begin}"
            )));
        }
        cursor = end;
    }
    if cursor != data.len() {
        return Err(Error::Format(format!(
            "size mismatch: header covers {cursor} bytes but data region has {}",
            data.len()
        )));
    }
    Ok(map)
}

pub fn save(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(map)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorMap> {
    from_bytes(&fs::read(path)?)
}
