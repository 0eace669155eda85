//! Model serialization: one binary file holding a JSON header (run
//! configuration, encoder shape, vocabulary, parameter table) followed by
//! the raw little-endian buffers. The header length leads as a u64 so the
//! file can be split without parsing JSON incrementally.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamStore, Scalar};
use crate::config::Config;
use crate::corpus::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
    /// Byte offset into the buffer section.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub config: Config,
    pub encoder: EncoderConfig,
    pub vocabulary: Vocabulary,
    pub params: Vec<ParamMeta>,
}

/// Write `bytes` to `path` through a sibling temp file and a rename, so a
/// crash never leaves a half-written artifact in place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save<T: Scalar>(
    path: &Path,
    config: &Config,
    encoder: &EncoderConfig,
    vocabulary: &Vocabulary,
    store: &ParamStore<T>,
) -> Result<()> {
    let width = T::DTYPE.byte_width();
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for e in store.iter() {
        params.push(ParamMeta {
            name: e.name.clone(),
            shape: e.shape.clone(),
            group: e.group.name().to_string(),
            offset,
            len: e.data.len(),
        });
        offset += e.data.len() * width;
    }
    let header = Header {
        dtype: T::DTYPE.name().to_string(),
        config: config.clone(),
        encoder: encoder.clone(),
        vocabulary: vocabulary.clone(),
        params,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {}", e)))?;

    let mut out = Vec::with_capacity(8 + header_json.len() + offset);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for e in store.iter() {
        for &v in &e.data {
            T::write_le(&mut out, v);
        }
    }
    atomic_write(path, &out)
}

/// Parse the JSON header and return it with the trailing buffer bytes.
fn split_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {}", path.display(), e)))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file shorter than the length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::Checkpoint(format!(
            "header claims {} bytes, file has {}",
            header_len,
            bytes.len() - 8
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header decode: {}", e)))?;
    Ok((header, bytes[8 + header_len..].to_vec()))
}

/// Header only; lets callers pick the element type before loading buffers.
pub fn read_header(path: &Path) -> Result<Header> {
    split_file(path).map(|(h, _)| h)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Header, ParamStore<T>)> {
    let (header, buffers) = split_file(path)?;
    if header.dtype != T::DTYPE.name() {
        return Err(Error::Checkpoint(format!(
            "stored dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE.name()
        )));
    }
    let width = T::DTYPE.byte_width();
    let mut store = ParamStore::new();
    for meta in &header.params {
        let group = ParamGroup::parse(&meta.group)
            .ok_or_else(|| Error::Checkpoint(format!("unknown group {}", meta.group)))?;
        let end = meta.offset + meta.len * width;
        if end > buffers.len() {
            return Err(Error::Checkpoint(format!(
                "{} extends to byte {} of a {}-byte buffer section",
                meta.name,
                end,
                buffers.len()
            )));
        }
        let data: Vec<T> = buffers[meta.offset..end]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        store.register(&meta.name, meta.shape.clone(), data, group)?;
    }
    Ok((header, store))
}
