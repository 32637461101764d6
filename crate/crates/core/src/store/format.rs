//! Binary checkpoint format.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, then `N` bytes of
//! UTF-8 JSON mapping each tensor name to
//! `{"dtype":"F32","shape":[..],"data_offsets":[begin,end]}`, then the payload
//! of concatenated little-endian f32 buffers. Offsets are relative to the
//! payload start. Keys are written in lexicographic order and the optional
//! `__metadata__` entry carries `{"origin_tag": ..}`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::numeric::fnv1a64;

pub const METADATA_KEY: &str = "__metadata__";
const DTYPE_F32: &str = "F32";

#[derive(Serialize)]
struct EntryOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [u64; 2],
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    origin_tag: Option<String>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Tensor(EntryOut<'a>),
    Metadata(Metadata),
}

#[derive(Deserialize)]
struct EntryIn {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order, keeping duplicates so they can be reported.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;
        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, serde_json::Value>()? {
                    out.push(entry);
                }
                Ok(RawHeader(out))
            }
        }
        de.deserialize_map(HeaderVisitor)
    }
}

/// Serializes a checkpoint. Output is a pure function of the checkpoint.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header: BTreeMap<&str, HeaderValue<'_>> = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in ckpt.iter() {
        let len = 4 * t.numel() as u64;
        header.insert(
            name,
            HeaderValue::Tensor(EntryOut {
                dtype: DTYPE_F32,
                shape: t.shape(),
                data_offsets: [offset, offset + len],
            }),
        );
        offset += len;
    }
    if let Some(tag) = ckpt.origin_tag() {
        header.insert(
            METADATA_KEY,
            HeaderValue::Metadata(Metadata {
                origin_tag: Some(tag.to_string()),
            }),
        );
    }
    let json = serde_json::to_vec(&header).expect("header serialization cannot fail");

    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in ckpt.iter() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(Error::TruncatedPayload(format!(
            "header length {header_len} exceeds the {available} bytes after the prefix"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header_str = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let RawHeader(entries) =
        serde_json::from_str(header_str).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut tensors = BTreeMap::new();
    let mut origin_tag = None;
    let mut seen_metadata = false;
    for (name, value) in entries {
        if name == METADATA_KEY {
            if seen_metadata {
                return Err(Error::DuplicateName(name));
            }
            seen_metadata = true;
            let meta: Metadata = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("bad {METADATA_KEY}: {e}")))?;
            origin_tag = meta.origin_tag;
            continue;
        }
        if tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        if name.is_empty() {
            return Err(Error::MalformedHeader("empty tensor name".into()));
        }
        // dtype is checked before the full entry so that an unknown dtype with
        // an otherwise well-formed entry is reported as such.
        if let Some(dtype) = value.get("dtype").and_then(|d| d.as_str()) {
            if dtype != DTYPE_F32 {
                return Err(Error::UnsupportedDtype {
                    name,
                    dtype: dtype.to_string(),
                });
            }
        }
        let entry: EntryIn = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        debug_assert_eq!(entry.dtype, DTYPE_F32);
        if entry.shape.contains(&0) {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` has zero dimension in shape {:?}",
                entry.shape
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedHeader(format!("tensor `{name}` shape overflows")))?;
        let [begin, end] = entry.data_offsets;
        if end < begin || end - begin != 4 * numel as u64 {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}`: offsets [{begin}, {end}] do not span {numel} f32 values"
            )));
        }
        if end > payload.len() as u64 {
            return Err(Error::TruncatedPayload(format!(
                "tensor `{name}` ends at {end} but the payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape, data).map_err(|_| {
            Error::MalformedHeader(format!("tensor `{name}` has an inconsistent shape"))
        })?;
        tensors.insert(name, tensor);
    }
    Ok(Checkpoint::from_map(tensors, origin_tag))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt))?;
    Ok(())
}

/// FNV-1a of the serialized checkpoint, i.e. of its on-disk file.
pub fn checkpoint_fnv1a(ckpt: &Checkpoint) -> u64 {
    fnv1a64(&checkpoint_to_bytes(ckpt))
}
