//! Weight file layout:
//!
//! ```text
//! "DNSEG001"                       8 bytes
//! header length                    u64 little-endian
//! header                           UTF-8 JSON: config + tensor directory
//! tensor blobs                     f64 little-endian, directory order
//! CRC-32 of all preceding bytes    u32 little-endian
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, DnVariant, ParamKind, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DNSEG001";
const MAGIC_FAMILY: &[u8] = b"DNSEG";
const FORMAT: &str = "dnseg-weights";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    config: UNetConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

pub fn save_model<S: Scalar>(model: &UNet<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let params = model.params();
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|p| {
            let e = Entry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.shape.clone(),
                offset,
            };
            offset += 8 * p.data.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        dtype: "f64".into(),
        config: model.config().clone(),
        tensors,
    })?;

    let mut bytes = Vec::with_capacity(16 + header.len() + offset as usize + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in &params {
        for v in p.data {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<UNet<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Like [`load_model`] but rejects a file holding a different variant.
pub fn load_model_expecting<S: Scalar>(path: impl AsRef<Path>, variant: DnVariant) -> Result<UNet<S>> {
    let model = load_model(path)?;
    if model.variant() != variant {
        return Err(Error::VariantMismatch {
            expected: variant.to_string(),
            found: model.variant().to_string(),
        });
    }
    Ok(model)
}

fn decode<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<UNet<S>> {
    let truncated = |context: &str| Error::Truncated {
        path: path.to_path_buf(),
        context: context.into(),
    };
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };

    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() {
            truncated("magic")
        } else {
            Error::BadMagic {
                path: path.to_path_buf(),
                expected: "dnseg weight",
            }
        });
    }
    let magic = &bytes[..8];
    if magic != MAGIC {
        return Err(if magic.starts_with(MAGIC_FAMILY) {
            Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(&MAGIC[5..]).into_owned(),
                found: String::from_utf8_lossy(&magic[5..]).into_owned(),
            }
        } else {
            Error::BadMagic {
                path: path.to_path_buf(),
                expected: "dnseg weight",
            }
        });
    }
    let len_bytes = bytes.get(8..16).ok_or_else(|| truncated("header length"))?;
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16usize.saturating_add(header_len))
        .ok_or_else(|| truncated("header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| malformed(format!("header: {e}")))?;
    if header.format != FORMAT || header.dtype != "f64" {
        return Err(malformed(format!("unexpected format {:?} / dtype {:?}", header.format, header.dtype)));
    }

    let blob_start = 16 + header_len;
    let blob_len: usize = header.tensors.iter().map(|t| 8 * t.shape.iter().product::<usize>()).sum();
    let expected_len = blob_start + blob_len + 4;
    if bytes.len() < expected_len {
        return Err(truncated(&format!("{} of {expected_len} bytes", bytes.len())));
    }
    if bytes.len() > expected_len {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - expected_len)));
    }
    let (body, tail) = bytes.split_at(expected_len - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut model: UNet<S> = build_model(&header.config).map_err(|e| malformed(format!("config: {e}")))?;
    let names: Vec<(String, Vec<usize>)> = model.params().into_iter().map(|p| (p.name, p.shape)).collect();
    if names.len() != header.tensors.len() {
        return Err(malformed(format!(
            "directory lists {} tensors, the {} configuration has {}",
            header.tensors.len(),
            header.config.dn_variant,
            names.len()
        )));
    }
    for (((name, shape), (_, buf)), entry) in names.iter().zip(model.params_mut()).zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(malformed(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let start = blob_start + entry.offset as usize;
        let raw = body
            .get(start..start + 8 * buf.len())
            .ok_or_else(|| malformed(format!("tensor {name} lies outside the blob section")))?;
        for (v, chunk) in buf.iter_mut().zip(raw.chunks_exact(8)) {
            *v = S::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    model
        .validate_dn()
        .map_err(|e| malformed(format!("normalization parameters: {e}")))?;
    Ok(model)
}
