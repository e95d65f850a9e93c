//! Named, ordered, flat-indexable parameter tensors.
//!
//! A [`ParameterStore`] is an immutable snapshot. Every mutation
//! ([`ParameterStore::apply_updates`]) yields a new store so that the pre- and
//! post-surgery parameter sets can both be digested and compared.
//!
//! Canonical byte layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "MBDP" (".mbds" datasets use "MBDS")
//! version      u32
//! entry count  u64
//! per entry:
//!   name length u32, name bytes (ASCII)
//!   rank u32, dims u64 * rank
//!   values f64 * prod(dims), IEEE-754 little-endian, row-major
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{MbdError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const PARAM_MAGIC: [u8; 4] = *b"MBDP";

/// One named tensor. Role tags are derived from the dotted name prefix so that
/// they survive a round trip through the canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    role_tags: BTreeSet<String>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || !name.is_ascii() {
            return Err(MbdError::validation(format!(
                "tensor name must be nonempty ASCII, got {name:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(MbdError::validation(format!(
                "tensor '{name}' has a zero dimension in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(MbdError::Dimension {
                context: "tensor values",
                expected,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(MbdError::NonFinite(format!("tensor '{name}' at offset {pos}")));
        }
        let role_tags = role_tags_for(&name);
        Ok(TensorEntry {
            name,
            shape,
            values,
            role_tags,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn role_tags(&self) -> &BTreeSet<String> {
        &self.role_tags
    }

    pub fn has_role(&self, tag: &str) -> bool {
        self.role_tags.contains(tag)
    }
}

/// Role labels for a tensor name. `gen.A.hidden.w` maps to `generator:A`,
/// `prop.L` to `property:L`, `fusion.*` to `fusion`, and so on. Unknown
/// prefixes carry no tag.
pub fn role_tags_for(name: &str) -> BTreeSet<String> {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    let modality = parts.next().filter(|m| matches!(*m, "L" | "A" | "V"));
    let mut tags = BTreeSet::new();
    let prefixed = |role: &str| modality.map(|m| format!("{role}:{m}"));
    let tag = match head {
        "fusion" => Some("fusion".to_string()),
        "head" => Some("task_head".to_string()),
        "gen" => prefixed("generator"),
        "prop" => prefixed("property"),
        "de" => prefixed("decomposition"),
        "recomb" => prefixed("recombiner"),
        "bt" => prefixed("back_translation"),
        _ => None,
    };
    tags.extend(tag);
    tags
}

/// A coordinate addressed by entry name and offset within that entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(String, usize)", into = "(String, usize)")]
pub struct GlobalIndex {
    pub entry_name: String,
    pub offset: usize,
}

impl GlobalIndex {
    pub fn new(entry_name: impl Into<String>, offset: usize) -> Self {
        GlobalIndex {
            entry_name: entry_name.into(),
            offset,
        }
    }
}

impl From<(String, usize)> for GlobalIndex {
    fn from((entry_name, offset): (String, usize)) -> Self {
        GlobalIndex { entry_name, offset }
    }
}

impl From<GlobalIndex> for (String, usize) {
    fn from(g: GlobalIndex) -> Self {
        (g.entry_name, g.offset)
    }
}

impl fmt::Display for GlobalIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.entry_name, self.offset)
    }
}

/// SHA-256 digest of a canonical serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = MbdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != 64 || s.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(MbdError::Format(format!(
                "digest must be 64 lowercase hex chars, got {s:?}"
            )));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| MbdError::Format(format!("bad digest hex: {e}")))?;
        Ok(Digest(out))
    }
}

#[derive(Debug, Clone)]
pub struct ParameterStore {
    entries: Vec<TensorEntry>,
    format_version: u32,
    offsets: Vec<usize>,
    total: usize,
    by_name: HashMap<String, usize>,
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.format_version == other.format_version && self.entries == other.entries
    }
}

impl ParameterStore {
    pub fn new(entries: Vec<TensorEntry>) -> Result<Self> {
        Self::with_version(entries, FORMAT_VERSION)
    }

    pub fn with_version(entries: Vec<TensorEntry>, format_version: u32) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(entries.len());
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0usize;
        for (i, e) in entries.iter().enumerate() {
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(MbdError::validation(format!("duplicate tensor name '{}'", e.name)));
            }
            offsets.push(total);
            total += e.len();
        }
        Ok(ParameterStore {
            entries,
            format_version,
            offsets,
            total,
            by_name,
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty store is valid")
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    /// Total parameter count |W|.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry_position(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Flat offset of the first coordinate of entry `pos`.
    pub fn entry_offset(&self, pos: usize) -> usize {
        self.offsets[pos]
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.entry(name)
            .map(TensorEntry::values)
            .ok_or_else(|| MbdError::validation(format!("no tensor named '{name}'")))
    }

    /// Flat position `i` to (entry, offset).
    pub fn flatten(&self, i: usize) -> Result<GlobalIndex> {
        if i >= self.total {
            return Err(MbdError::IndexOutOfRange {
                index: i,
                len: self.total,
            });
        }
        // Last entry whose start offset is <= i; zero-length entries cannot exist.
        let pos = self.offsets.partition_point(|&o| o <= i) - 1;
        Ok(GlobalIndex::new(self.entries[pos].name.clone(), i - self.offsets[pos]))
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self, idx: &GlobalIndex) -> Result<usize> {
        let pos = self
            .entry_position(&idx.entry_name)
            .ok_or_else(|| MbdError::validation(format!("no tensor named '{}'", idx.entry_name)))?;
        let len = self.entries[pos].len();
        if idx.offset >= len {
            return Err(MbdError::IndexOutOfRange { index: idx.offset, len });
        }
        Ok(self.offsets[pos] + idx.offset)
    }

    pub fn value_at(&self, i: usize) -> Result<f64> {
        let g = self.flatten(i)?;
        Ok(self.entries[self.by_name[&g.entry_name]].values[g.offset])
    }

    pub fn value(&self, idx: &GlobalIndex) -> Result<f64> {
        let flat = self.unflatten(idx)?;
        let pos = self.by_name[&idx.entry_name];
        debug_assert_eq!(self.offsets[pos] + idx.offset, flat);
        Ok(self.entries[pos].values[idx.offset])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(&e.values);
        }
        out
    }

    /// A store with identical names and shapes holding `flat` values.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.total {
            return Err(MbdError::Dimension {
                context: "flat parameter vector",
                expected: self.total,
                got: flat.len(),
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(&self.offsets)
            .map(|(e, &o)| TensorEntry::new(e.name.clone(), e.shape.clone(), flat[o..o + e.len()].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::with_version(entries, self.format_version)
    }

    /// New store with the listed coordinates replaced. Everything else is
    /// copied bit-for-bit; `self` is untouched.
    pub fn apply_updates(&self, updates: &[(GlobalIndex, f64)]) -> Result<Self> {
        let flat = updates
            .iter()
            .map(|(g, v)| self.unflatten(g).map(|i| (i, *v)))
            .collect::<Result<Vec<_>>>()?;
        self.apply_flat_updates(&flat)
    }

    pub fn apply_flat_updates(&self, updates: &[(usize, f64)]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &(i, v) in updates {
            if i >= self.total {
                return Err(MbdError::IndexOutOfRange {
                    index: i,
                    len: self.total,
                });
            }
            if !seen.insert(i) {
                return Err(MbdError::validation(format!("duplicate update for flat index {i}")));
            }
            if !v.is_finite() {
                return Err(MbdError::NonFinite(format!("update for flat index {i}")));
            }
        }
        let mut entries = self.entries.clone();
        for &(i, v) in updates {
            let pos = self.offsets.partition_point(|&o| o <= i) - 1;
            entries[pos].values[i - self.offsets[pos]] = v;
        }
        Ok(ParameterStore {
            entries,
            format_version: self.format_version,
            offsets: self.offsets.clone(),
            total: self.total,
            by_name: self.by_name.clone(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Bitwise equality of every value, name, shape and the format version.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.format_version == other.format_version
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Flat indices at which the two stores differ bitwise. Both stores must
    /// share a layout.
    pub fn bitwise_diff(&self, other: &Self) -> Result<Vec<usize>> {
        if self.total != other.total
            || self
                .entries
                .iter()
                .zip(&other.entries)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(MbdError::validation("stores have different layouts"));
        }
        let a = self.to_flat();
        let b = other.to_flat();
        Ok(a.iter()
            .zip(&b)
            .enumerate()
            .filter(|(_, (x, y))| x.to_bits() != y.to_bits())
            .map(|(i, _)| i)
            .collect())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        encode_container(PARAM_MAGIC, self.format_version, &self.entries)
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self> {
        let (version, entries) = decode_container(bytes, PARAM_MAGIC)?;
        Self::with_version(entries, version)
    }

    pub fn digest(&self) -> Digest {
        Digest::of_bytes(&self.canonical_bytes())
    }

    /// Writes `path` (canonical bytes) and `path.sha256` (hex digest).
    pub fn write_file(&self, path: &Path) -> Result<Digest> {
        write_with_sidecar(path, &self.canonical_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_canonical_bytes(&fs::read(path)?)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

pub(crate) fn write_with_sidecar(path: &Path, bytes: &[u8]) -> Result<Digest> {
    let digest = Digest::of_bytes(bytes);
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), format!("{digest}\n"))?;
    Ok(digest)
}

pub(crate) fn encode_container(magic: [u8; 4], version: u32, entries: &[TensorEntry]) -> Vec<u8> {
    let payload: usize = entries
        .iter()
        .map(|e| 8 + e.name.len() + 8 * e.shape.len() + 8 * e.len())
        .sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MbdError::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode_container(bytes: &[u8], magic: [u8; 4]) -> Result<(u32, Vec<TensorEntry>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(MbdError::Format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| MbdError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| MbdError::Format(format!("shape overflow for '{name}'")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| MbdError::Format("size overflow".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(TensorEntry::new(name, shape, values)?);
    }
    if r.pos != bytes.len() {
        return Err(MbdError::Format(format!(
            "{} trailing bytes after container",
            bytes.len() - r.pos
        )));
    }
    Ok((version, entries))
}
