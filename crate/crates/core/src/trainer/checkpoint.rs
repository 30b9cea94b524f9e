//! Versioned binary checkpoints.
//!
//! Layout: magic `FAMO`, format version (u32), entry count (u32), then per
//! entry: name length (u32), UTF-8 name, dtype tag (u8), rank (u32), one u32
//! per extent, and the little-endian payload. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::substrate::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FAMO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U64(Vec<u64>),
    Text(String),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U64(_) => 1,
            Payload::Text(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::U64(_) => "u64",
            Payload::Text(_) => "utf8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub extents: Vec<u32>,
    pub payload: Payload,
}

/// Ordered table of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

fn extents_of(shape: Shape) -> Vec<u32> {
    shape.0.iter().map(|&e| e as u32).collect()
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, extents: Vec<u32>, payload: Payload) {
        self.entries.push(Entry {
            name: name.into(),
            extents,
            payload,
        });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, extents_of(t.shape()), Payload::F32(t.data().to_vec()));
    }

    pub fn push_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        self.push(name, vec![values.len() as u32], Payload::U64(values.to_vec()));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.push(name, vec![text.len() as u32], Payload::Text(text.to_owned()));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }

    pub fn tensor(&self, name: &str, expected: Shape) -> Result<Tensor> {
        let e = self.get(name)?;
        let Payload::F32(data) = &e.payload else {
            return Err(Error::Checkpoint(format!("{name}: expected f32, found {}", e.payload.kind())));
        };
        if e.extents != extents_of(expected) {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: expected shape {:?}, found {:?}", expected.0, e.extents),
            ));
        }
        Tensor::from_vec(expected, data.clone())
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::U64(v) => Ok(v),
            other => Err(Error::Checkpoint(format!("{name}: expected u64, found {}", other.kind()))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::Text(s) => Ok(s),
            other => Err(Error::Checkpoint(format!("{name}: expected utf8, found {}", other.kind()))),
        }
    }

    /// Parameters, Adam slots and buffers of a store under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.params() {
            self.push_tensor(format!("{prefix}/{}", p.name), &p.value);
            self.push_tensor(format!("{prefix}/{}#m", p.name), &p.m);
            self.push_tensor(format!("{prefix}/{}#v", p.name), &p.v);
            self.push_u64s(format!("{prefix}/{}#t", p.name), &[p.t]);
        }
        for (name, b) in store.buffers() {
            self.push_tensor(format!("{prefix}/{name}"), b);
        }
    }

    /// Load what [`Checkpoint::push_store`] wrote into a store of the same
    /// architecture; every shape must match.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for p in store.params_mut() {
            let shape = p.value.shape();
            p.value = self.tensor(&format!("{prefix}/{}", p.name), shape)?;
            p.m = self.tensor(&format!("{prefix}/{}#m", p.name), shape)?;
            p.v = self.tensor(&format!("{prefix}/{}#v", p.name), shape)?;
            let t = self.u64s(&format!("{prefix}/{}#t", p.name))?;
            p.t = *t
                .first()
                .ok_or_else(|| Error::Checkpoint(format!("{prefix}/{}#t is empty", p.name)))?;
            p.grad.fill(0.0);
        }
        for (name, b) in store.buffers_mut() {
            *b = self.tensor(&format!("{prefix}/{name}"), b.shape())?;
        }
        Ok(())
    }

    /// Parameter values only, for inference.
    pub fn load_values(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for p in store.params_mut() {
            p.value = self.tensor(&format!("{prefix}/{}", p.name), p.value.shape())?;
        }
        for (name, b) in store.buffers_mut() {
            *b = self.tensor(&format!("{prefix}/{name}"), b.shape())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.tag());
            out.extend_from_slice(&(e.extents.len() as u32).to_le_bytes());
            for x in &e.extents {
                out.extend_from_slice(&x.to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"FAMO\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (this build reads {VERSION})")));
        }
        let count = r.u32("entry count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("entry name at offset {} is not UTF-8", r.at - len)))?;
            let tag = r.take(1, "dtype")?[0];
            let rank = r.u32("rank")? as usize;
            let extents = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
            let count = extents.iter().map(|&e| e as usize).product::<usize>();
            let payload = match tag {
                0 => Payload::F32(
                    r.take(4 * count, &name)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => Payload::U64(
                    r.take(8 * count, &name)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => Payload::Text(
                    String::from_utf8(r.take(count, &name)?.to_vec())
                        .map_err(|_| Error::Checkpoint(format!("{name}: text is not UTF-8")))?,
                ),
                other => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
            };
            ckpt.push(name, extents, payload);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes at offset {}", bytes.len() - r.at, r.at)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save keeps the previous file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(d) => Error::Checkpoint(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {} reading {what} ({n} bytes wanted, {} left)",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
