//! NPCK1 named-tensor checkpoints.
//!
//! `NPCK1`, u32 entry count, then per entry: u16 name length, UTF-8 name, u8 rank,
//! `rank` × u32 dims, f32 payload. Little-endian throughout.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NPCK1";

/// Ordered `(name, tensor)` entries with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCheckpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ModelCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::data(format!("duplicate checkpoint entry {name}")));
            }
        }
        Ok(ModelCheckpoint { entries })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::data(format!("duplicate checkpoint entry {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append every parameter of `store` (cast to f32).
    pub fn extend_from_store<T: Scalar>(&mut self, store: &ParamStore<T>) -> Result<()> {
        for p in store.params() {
            self.insert(p.name.clone(), p.value.cast())?;
        }
        Ok(())
    }

    /// Copy values for every parameter of `store` whose name is present; fail on a missing
    /// name or shape mismatch.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter {name}")))?;
            store.set_value(id, t.cast())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::data("too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::data(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::data("rank exceeds 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::data("dim exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(5)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "bad magic, expected NPCK1".into()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at + 2, "entry name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(r.error_at(at, format!("duplicate entry name {name}")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload_at = r.pos;
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.error_at(payload_at, e.to_string()))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ModelCheckpoint { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.bytes.len(),
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(c: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, c.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::decode(&bytes, path)
}
