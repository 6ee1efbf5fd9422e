//! Single-file checkpoint: magic, version, JSON header, raw f32 payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, EncoderParams, Lexicon, PhraseEncoder};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
const MAGIC: &[u8; 8] = b"PHRSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    lowercase: bool,
    lexicon: Vec<String>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Writes `dir/model.ckpt` (creating `dir`), returning the file path.
pub fn save_checkpoint(dir: &Path, encoder: &PhraseEncoder) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = &encoder.params;
    let mut payload = Vec::with_capacity(params.num_params() * 4);
    let mut tensors = Vec::new();
    for ((name, shape), data) in params.tensor_specs().into_iter().zip(params.tensors()) {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
            bytes: payload.len() - offset,
        });
    }
    let header = Header {
        config: params.config.clone(),
        lowercase: encoder.lowercase,
        lexicon: encoder.lexicon.tokens()[1..].to_vec(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;

    let path = dir.join(CHECKPOINT_FILE);
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)
    };
    write().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a checkpoint from a file or from a directory containing `model.ckpt`.
pub fn load_checkpoint(path: &Path) -> Result<PhraseEncoder> {
    let path = resolve(path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |msg: &str| Error::Corrupt {
        path: path.clone(),
        msg: msg.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let payload = &body[header_len..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Checksum(path));
    }
    header.config.validate()?;
    let mut data = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let raw = payload
            .get(t.offset..t.offset + t.bytes)
            .ok_or_else(|| corrupt(&format!("tensor {} outside payload", t.name)))?;
        if t.bytes % 4 != 0 || t.shape.iter().product::<usize>() * 4 != t.bytes {
            return Err(corrupt(&format!("tensor {} has inconsistent size", t.name)));
        }
        data.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    let params = EncoderParams::from_tensors(&header.config, data)?;
    for ((name, shape), t) in params.tensor_specs().iter().zip(&header.tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(corrupt(&format!("unexpected tensor {} {:?}", t.name, t.shape)));
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    PhraseEncoder::new(params, Lexicon::from_tokens(header.lexicon), header.lowercase)
}
