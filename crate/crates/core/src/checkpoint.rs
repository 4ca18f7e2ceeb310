//! Versioned binary containers for parameters and datasets.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a TOML header of
//! that many bytes, then every declared array as little-endian `f64` in header
//! order. Values are written bit for bit, so a round trip is exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FPMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

/// Writes magic, version, header and payload.
pub(crate) fn encode_container(magic: &[u8; 8], version: u32, header: &str, arrays: &[&[f64]]) -> Vec<u8> {
    let payload: usize = arrays.iter().map(|a| a.len() * 8).sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a container into its header text and payload, checking magic and
/// version. `origin` names the source in errors.
pub(crate) fn decode_container<'a>(
    magic: &[u8; 8],
    version: u32,
    bytes: &'a [u8],
    origin: &'a Path,
) -> Result<(&'a str, Payload<'a>)> {
    let parse = |offset: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < PREAMBLE {
        return Err(parse(bytes.len(), "truncated preamble".into()));
    }
    if &bytes[..8] != magic {
        return Err(parse(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(parse(8, format!("unsupported version {found}, expected {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse(12, format!("header length {len} exceeds file")))?;
    let header = std::str::from_utf8(&bytes[PREAMBLE..end]).map_err(|e| parse(PREAMBLE + e.valid_up_to(), "header is not UTF-8".into()))?;
    Ok((
        header,
        Payload {
            bytes,
            offset: end,
            origin,
        },
    ))
}

pub(crate) struct Payload<'a> {
    bytes: &'a [u8],
    offset: usize,
    origin: &'a Path,
}

impl Payload<'_> {
    pub(crate) fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(self.offset))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse {
                path: self.origin.to_path_buf(),
                offset: self.offset as u64,
                message: format!("payload truncated, {n} values expected"),
            })?;
        let out = self.bytes[self.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.offset = end;
        Ok(out)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Parse {
                path: self.origin.to_path_buf(),
                offset: self.offset as u64,
                message: format!("{} trailing bytes", self.bytes.len() - self.offset),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    Trainable,
    Frozen,
    Buffer,
}

impl From<ParamKind> for KindTag {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Trainable => KindTag::Trainable,
            ParamKind::Frozen => KindTag::Frozen,
            ParamKind::Buffer => KindTag::Buffer,
        }
    }
}

impl From<KindTag> for ParamKind {
    fn from(k: KindTag) -> Self {
        match k {
            KindTag::Trainable => ParamKind::Trainable,
            KindTag::Frozen => ParamKind::Frozen,
            KindTag::Buffer => ParamKind::Buffer,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    store: String,
    name: String,
    kind: KindTag,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    arrays: Vec<ArrayEntry>,
}

/// Named parameter stores plus caller-defined metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<M> {
    pub meta: M,
    pub stores: Vec<(String, ParamStore)>,
}

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn store(&self, name: &str) -> Option<&ParamStore> {
        self.stores.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut arrays: Vec<&[f64]> = Vec::new();
        for (store_name, store) in &self.stores {
            for id in store.ids() {
                let t = store.get(id);
                entries.push(ArrayEntry {
                    store: store_name.clone(),
                    name: store.name(id).to_string(),
                    kind: store.kind(id).into(),
                    shape: t.shape().to_vec(),
                });
                arrays.push(t.data());
            }
        }
        let header = toml::to_string(&Header {
            meta: &self.meta,
            arrays: entries,
        })
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        Ok(encode_container(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &arrays))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (text, mut payload) = decode_container(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes, origin)?;
        let header: Header<M> = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            offset: PREAMBLE as u64 + e.span().map_or(0, |s| s.start as u64),
            message: format!("checkpoint header: {}", e.message()),
        })?;
        let mut stores: Vec<(String, ParamStore)> = Vec::new();
        for entry in header.arrays {
            let n = entry.shape.iter().product();
            let tensor = Tensor::new(&entry.shape, payload.take(n)?)?;
            let idx = match stores.iter().position(|(s, _)| *s == entry.store) {
                Some(i) => i,
                None => {
                    stores.push((entry.store.clone(), ParamStore::new()));
                    stores.len() - 1
                }
            };
            if stores[idx].1.find(&entry.name).is_some() {
                return Err(Error::Format(format!("duplicate array {}/{}", entry.store, entry.name)));
            }
            stores[idx].1.insert(entry.name, entry.kind.into(), tensor);
        }
        payload.finish()?;
        Ok(Self {
            meta: header.meta,
            stores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
