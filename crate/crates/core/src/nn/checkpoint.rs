//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CSEGNET\0"
//! version    u32
//! header_len u64
//! header     TOML: format_version, [config], [[params]] {name, shape}
//! blobs      f64 LE values of each parameter, in header order
//! digest     32-byte SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NetworkConfig, NetworkInstance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CSEGNET\0";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    params: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn encode(net: &NetworkInstance) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: net.config.clone(),
        params: net
            .params
            .iter()
            .map(|p| BlobEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(64 + text.len() + net.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for p in &net.params {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<NetworkInstance> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(fail("file is truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("digest mismatch: file is truncated or corrupted"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header length exceeds file"))?;
    let text = std::str::from_utf8(&body[20..header_end])
        .map_err(|_| fail("header is not UTF-8"))?;
    let header: Header =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(fail("header version disagrees with preamble"));
    }
    let mut offset = header_end;
    let mut values = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > body.len() {
            return Err(Error::Checkpoint(format!(
                "blob for `{}` runs past end of file",
                entry.name
            )));
        }
        let data = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((entry.name, Tensor::new(entry.shape, data)?));
        offset = end;
    }
    if offset != body.len() {
        return Err(fail("trailing bytes after parameter blobs"));
    }
    NetworkInstance::from_parts(header.config, values)
}

/// Writes `net` to `path` (via a temporary file and rename).
pub fn save_checkpoint(net: &NetworkInstance, path: &Path) -> Result<()> {
    let bytes = encode(net)?;
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkInstance> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
