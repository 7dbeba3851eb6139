//! Flat, versioned binary container for named parameter groups.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic    8 bytes  b"NDGRADPR"
//! version  u32
//! groups   u32
//! per group:
//!   name         str (u32 len + utf8)
//!   tensor count u32
//!   per tensor:
//!     name  str
//!     ndim  u8
//!     dims  u64 * ndim
//!     data  f64 * product(dims), little-endian
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use crate::params::ParamStore;
use crate::Tensor;

pub const MAGIC: &[u8; 8] = b"NDGRADPR";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("bad magic (not a parameter record)")]
    BadMagic,
    #[error("unsupported record version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error("component '{component}': missing tensor '{name}'")]
    MissingTensor { component: String, name: String },
    #[error("component '{component}': tensor '{name}' shape mismatch (file {file:?}, store {store:?})")]
    ShapeMismatch { component: String, name: String, file: Vec<usize>, store: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One named group of named tensors, in a stable order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Group {
    pub tensors: Vec<(String, Tensor)>,
}

impl Group {
    pub fn from_store(store: &ParamStore) -> Self {
        Group {
            tensors: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
        }
    }

    /// Write this group's tensors into `store`, matched by name.
    pub fn apply_to_store(&self, component: &str, store: &mut ParamStore) -> Result<(), RecordError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let found = self.tensors.iter().find(|(n, _)| *n == name).ok_or_else(|| {
                RecordError::MissingTensor { component: component.to_string(), name: name.clone() }
            })?;
            if found.1.shape() != store.get(id).shape() {
                return Err(RecordError::ShapeMismatch {
                    component: component.to_string(),
                    name,
                    file: found.1.shape().to_vec(),
                    store: store.get(id).shape().to_vec(),
                });
            }
            *store.get_mut(id) = found.1.clone();
        }
        Ok(())
    }
}

/// A whole record: named groups, serialized in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    pub groups: BTreeMap<String, Group>,
}

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    pub fn insert_store(&mut self, key: &str, store: &ParamStore) {
        self.groups.insert(key.to_string(), Group::from_store(store));
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), RecordError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.groups.len() as u32).to_le_bytes())?;
        for (key, group) in &self.groups {
            write_str(w, key)?;
            w.write_all(&(group.tensors.len() as u32).to_le_bytes())?;
            for (name, t) in &group.tensors {
                write_str(w, name)?;
                w.write_all(&[t.shape().len() as u8])?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, RecordError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RecordError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(RecordError::UnsupportedVersion(version));
        }
        let n_groups = read_u32(r)? as usize;
        let mut groups = BTreeMap::new();
        for _ in 0..n_groups {
            let key = read_str(r)?;
            let n_tensors = read_u32(r)? as usize;
            let mut tensors = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                let name = read_str(r)?;
                let mut ndim = [0u8; 1];
                r.read_exact(&mut ndim)?;
                let mut shape = Vec::with_capacity(ndim[0] as usize);
                for _ in 0..ndim[0] {
                    shape.push(read_u64(r)? as usize);
                }
                let len: usize = shape.iter().product();
                if len > (1 << 32) {
                    return Err(RecordError::Corrupt(format!("tensor '{name}' too large")));
                }
                let mut data = vec![0.0; len];
                let mut buf = [0u8; 8];
                for x in &mut data {
                    r.read_exact(&mut buf)?;
                    *x = f64::from_le_bytes(buf);
                }
                tensors.push((name, Tensor::new(shape, data)));
            }
            groups.insert(key, Group { tensors });
        }
        Ok(Record { groups })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RecordError> {
        let mut cursor = bytes;
        Record::read_from(&mut cursor)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, RecordError> {
    let len = read_u32(r)? as usize;
    if len > (1 << 20) {
        return Err(RecordError::Corrupt("string too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| RecordError::Corrupt("invalid utf8".into()))
}
