//! Checkpoint serialization.
//!
//! A checkpoint is a self-contained snapshot of a training run: the
//! configuration that produced it (an opaque UTF-8 text block), the step
//! counter, and a named tensor table holding both model parameters and
//! optimizer moment buffers.  Composing and re-reading that table is the
//! caller's business; this module only pins the byte layout.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PVAE"                       4 bytes magic
//! version                      u32
//! config length                u64, then that many UTF-8 bytes
//! step                         u64
//! tensor count                 u64
//! per tensor, in table order:
//!   name length                u64, then that many UTF-8 bytes
//!   rank                       u64
//!   dims                       rank × u64
//!   data                       product(dims) × f64 bits
//! ```
//!
//! The table is name-ordered, so serialization is a pure function of the
//! contents: save ∘ load ∘ save is byte-identical.  `from_bytes` rejects
//! anything it cannot interpret — wrong magic, unknown version, truncation,
//! trailing bytes, malformed UTF-8 — as [`Error::Format`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One entry of the tensor table.  `data.len()` always equals the dim
/// product; rank zero is a scalar with one value.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub step: u64,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(config_text: String, step: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_text,
            step,
            tensors: BTreeMap::new(),
        }
    }

    /// Add a tensor under a fresh name.
    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let want: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
            || Error::InvalidShape(format!("tensor '{name}' dim product overflows")),
        )?;
        if data.len() != want {
            return Err(Error::InvalidShape(format!(
                "tensor '{name}' has dims {dims:?} ({want} values) but {} values",
                data.len()
            )));
        }
        if self.tensors.contains_key(name) {
            return Err(Error::Contract(format!("tensor '{name}' already in checkpoint")));
        }
        self.tensors.insert(name.to_string(), TensorRecord { dims, data });
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, record) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(record.dims.len() as u64).to_le_bytes());
            for &d in &record.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &value in &record.data {
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut reader = Reader { bytes, at: 0 };
        let magic = reader.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, want {CHECKPOINT_MAGIC:?}")));
        }
        let version = u32::from_le_bytes(reader.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, want {CHECKPOINT_VERSION}"
            )));
        }
        let config_len = reader.length("config length")?;
        let config_text = reader.utf8(config_len, "config text")?;
        let step = reader.u64("step")?;
        let count = reader.length("tensor count")?;

        let mut tensors = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let name_len = reader.length("tensor name length")?;
            let name = reader.utf8(name_len, "tensor name")?;
            if previous.as_deref() >= Some(name.as_str()) {
                // Covers duplicates too; equal names are not ascending.
                return Err(Error::Format(format!("tensor names out of order at '{name}'")));
            }
            let rank = reader.length("tensor rank")?;
            let mut dims = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = reader.length("tensor dim")?;
                len = len
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor '{name}' dims overflow")))?;
                dims.push(d);
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let raw = reader.take(8, "tensor data")?;
                data.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            previous = Some(name.clone());
            tensors.insert(name, TensorRecord { dims, data });
        }
        if reader.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor table",
                bytes.len() - reader.at
            )));
        }
        Ok(Checkpoint { version, config_text, step, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated reading {what}")))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A u64 that must fit in the remaining input when used as a count.
    fn length(&mut self, what: &str) -> Result<usize> {
        let value = self.u64(what)?;
        usize::try_from(value)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("{what} {value} exceeds input size")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let raw = self.take(n, what)?;
        core::str::from_utf8(raw)
            .map(|s| s.to_string())
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}
