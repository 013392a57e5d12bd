//! Binary checkpoints.
//!
//! All integers are little-endian.
//!
//! ```text
//! "PIIP"            4-byte magic
//! u32               format version (1)
//! u32, bytes        model config snapshot (canonical TOML)
//! u32               record count
//! record*           u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!                   u32 rank, u64 dims[rank], payload, u32 CRC32 of the record
//! u32               CRC32 of everything from the config length to the last record
//! ```
//!
//! A file is fully verified before any tensor is materialized.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::config::{ConfigFile, PiipConfig};
use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"PIIP";
pub const VERSION: u32 = 1;

/// One verified tensor record; `payload` indexes into the file bytes.
#[derive(Debug, Clone)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    payload: Range<usize>,
}

/// A verified checkpoint file whose tensors have not been decoded yet.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: PiipConfig,
    pub records: Vec<Record>,
    bytes: Vec<u8>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Shape(format!("{what} too large for the checkpoint format")))
}

/// Serializes `model` to checkpoint bytes.
pub fn to_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let config = ConfigFile::from_model(model.config().clone()).to_canonical_string()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let body_start = out.len();
    put_u32(&mut out, len_u32(config.len(), "config snapshot")?);
    out.extend_from_slice(config.as_bytes());
    let store = model.params();
    put_u32(&mut out, len_u32(store.len(), "record count")?);
    for id in store.ids() {
        let start = out.len();
        let name = store.name(id);
        let t = store.get(id)?;
        put_u32(&mut out, len_u32(name.len(), "tensor name")?);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        put_u32(&mut out, len_u32(t.rank(), "tensor rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut out);
        }
        let crc = crc32fast::hash(&out[start..]);
        put_u32(&mut out, crc);
    }
    let crc = crc32fast::hash(&out[body_start..]);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

/// Bounds-checked little-endian reader over the file bytes.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => bail!(Integrity, "{}: truncated at byte {}", what(), self.bytes.len()),
        }
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Parses and verifies magic, version, every record CRC and the trailing
    /// CRC.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let header = || "header".to_string();
        if r.take(4, &header)? != MAGIC {
            bail!(Integrity, "header: bad magic, not a checkpoint file");
        }
        let version = r.u32(&header)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
        }
        let body_start = r.pos;
        let snap = || "config snapshot".to_string();
        let n = r.u32(&snap)? as usize;
        let config_bytes = r.take(n, &snap)?;
        let count = r.u32(&header)? as usize;

        let mut records = Vec::with_capacity(count.min(1 << 16));
        for index in 0..count {
            let start = r.pos;
            let unnamed = || format!("record {index}");
            let name_len = r.u32(&unnamed)? as usize;
            let name = String::from_utf8_lossy(r.take(name_len, &unnamed)?).into_owned();
            let what = || format!("record {index} (`{name}`)");
            let tag = r.take(1, &what)?[0];
            let rank = r.u32(&what)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64(&what)? as usize);
            }
            let dtype = DType::from_tag(tag);
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = numel.and_then(|n| n.checked_mul(dtype.map_or(1, DType::size)));
            let Some(size) = size else {
                bail!(Integrity, "{}: implausible shape {shape:?}", what());
            };
            let payload_start = r.pos;
            r.take(size, &what)?;
            let payload = payload_start..r.pos;
            let stored = r.u32(&what)?;
            if crc32fast::hash(&bytes[start..payload.end]) != stored {
                bail!(Integrity, "{}: CRC mismatch", what());
            }
            let Some(dtype) = dtype else {
                bail!(Integrity, "{}: unknown dtype tag {tag}", what());
            };
            records.push(Record { name, dtype, shape, payload });
        }
        let body_end = r.pos;
        let stored = r.u32(&|| "trailing CRC".to_string())?;
        if crc32fast::hash(&bytes[body_start..body_end]) != stored {
            bail!(Integrity, "trailing CRC mismatch (header or config snapshot corrupted)");
        }
        if r.pos != bytes.len() {
            bail!(Integrity, "{} trailing bytes after the checkpoint", bytes.len() - r.pos);
        }

        let text = std::str::from_utf8(config_bytes)
            .map_err(|_| Error::Integrity("config snapshot: not UTF-8".into()))?;
        let config = ConfigFile::parse(text)?.model;
        Ok(Self { config, records, bytes })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(fs::read(path)?)
    }

    /// Decodes one record.
    pub fn tensor<T: Real>(&self, record: &Record) -> Result<Tensor<T>> {
        if record.dtype != T::DTYPE {
            bail!(
                Shape,
                "tensor `{}`: stored as {:?}, model uses {:?}",
                record.name,
                record.dtype,
                T::DTYPE
            );
        }
        let data = self.bytes[record.payload.clone()]
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        Tensor::new(record.shape.clone(), data)
    }

    /// Copies every record into `model`, which must have exactly the same
    /// tensors. Nothing is written unless all of them match.
    pub fn restore<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let by_name: HashMap<&str, &Record> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let store = model.params();
        let mut decoded = Vec::with_capacity(store.len());
        for id in store.ids() {
            let name = store.name(id);
            let Some(rec) = by_name.get(name) else {
                bail!(Shape, "tensor `{name}` is missing from the checkpoint");
            };
            if rec.shape != store.shape(id) {
                bail!(
                    Shape,
                    "tensor `{name}`: checkpoint shape {:?}, model shape {:?}",
                    rec.shape,
                    store.shape(id)
                );
            }
            decoded.push((id, self.tensor::<T>(rec)?));
        }
        if let Some(extra) = self.records.iter().find(|r| store.id(&r.name).is_none()) {
            bail!(Shape, "tensor `{}` in the checkpoint has no counterpart in the model", extra.name);
        }
        let store = model.params_mut();
        for (id, t) in decoded {
            store.set(id, t)?;
        }
        Ok(())
    }

    /// Builds the model recorded in the snapshot and restores its weights.
    pub fn into_model<T: Real>(self) -> Result<Model<T>> {
        let mut model = Model::build(&self.config, 0)?;
        self.restore(&mut model)?;
        Ok(model)
    }
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Checkpoint::read(path)?.into_model()
}

/// Restores a checkpoint into an already-built model, e.g. one built from a
/// preset; mismatching tensors are reported by name.
pub fn load_into<T: Real>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::read(path)?.restore(model)
}
