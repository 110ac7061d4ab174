//! Binary checkpoint format: magic, version, config blob, named tensor
//! records, trailing CRC32. Tensors are stored as f32; the same f64→f32
//! rounding is applied on save and on load so a round trip is bitwise
//! stable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetRegistry;
use crate::encoder::EncoderConfig;
use crate::numerics::ParamSet;

pub const MAGIC: &[u8; 4] = b"TSBT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected TSBT")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("config blob does not parse: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("tensor {name}: shape {shape:?} does not match {len} scalars")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

/// Everything needed to rebuild the model besides the weights themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub encoder: EncoderConfig,
    pub registry: DatasetRegistry,
    /// Number of classes for a classification head, if one is attached.
    pub n_classes: Option<usize>,
    /// Effective run configuration (hyperparameters, seeds, paths) echoed
    /// for provenance.
    pub effective: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ParamSet,
}

/// Rounds every scalar through f32, the storage precision. Applying this
/// before comparing makes save→load bitwise stable.
pub fn quantize_to_storage(params: &mut ParamSet) {
    for e in params.entries_mut() {
        for v in &mut e.data {
            *v = *v as f32 as f64;
        }
    }
}

pub fn encode(config: &CheckpointConfig, params: &ParamSet) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let blob = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(&blob);
    buf.extend_from_slice(&(params.entries().len() as u32).to_le_bytes());
    for e in params.entries() {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    // CRC is checked before any record is consumed, so a truncated or
    // corrupted file never yields partial tensors.
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let blob_len = r.u32()? as usize;
    let config: CheckpointConfig = serde_json::from_slice(r.take(blob_len)?)?;
    let n_tensors = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::BadDtype(dtype));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.len() != len {
            return Err(CheckpointError::ShapeMismatch { name, shape, len: data.len() });
        }
        params.insert(&name, shape, data);
    }
    Ok(Checkpoint { config, params })
}

pub fn save(
    path: &Path,
    config: &CheckpointConfig,
    params: &ParamSet,
) -> Result<(), CheckpointError> {
    let bytes = encode(config, params)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn sample_config() -> CheckpointConfig {
        let mut registry = DatasetRegistry::new();
        registry.register("alpha");
        registry.register("beta");
        let mut effective = BTreeMap::new();
        effective.insert("seed".to_string(), "11".to_string());
        CheckpointConfig {
            encoder: EncoderConfig::default(),
            registry,
            n_classes: None,
            effective,
        }
    }

    #[test]
    fn round_trip_is_bitwise_stable() {
        let cfg = sample_config();
        let mut params = init_params(&cfg.encoder, 2, 41);
        quantize_to_storage(&mut params);
        let bytes = encode(&cfg, &params).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params.entries().len(), params.entries().len());
        for e in params.entries() {
            let b = back.params.get(&e.name).expect("tensor present");
            assert_eq!(b.shape, e.shape, "{}", e.name);
            for (x, y) in e.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", e.name);
            }
        }
        assert_eq!(back.config.registry.len(), 2);
        assert_eq!(back.config.effective["seed"], "11");
        // a second encode of the decoded state is byte-identical
        let bytes2 = encode(&back.config, &back.params).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn truncated_file_rejected() {
        let cfg = sample_config();
        let mut params = init_params(&cfg.encoder, 2, 41);
        quantize_to_storage(&mut params);
        let bytes = encode(&cfg, &params).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let cfg = sample_config();
        let mut params = init_params(&cfg.encoder, 2, 41);
        quantize_to_storage(&mut params);
        let mut bytes = encode(&cfg, &params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match decode(&bytes) {
            Err(CheckpointError::CrcMismatch { .. }) => {}
            other => panic!("expected crc mismatch, got {:?}", other.err()),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let cfg = sample_config();
        let params = init_params(&cfg.encoder, 2, 41);
        let mut bytes = encode(&cfg, &params).unwrap();
        bytes[0] = b'X';
        // recompute crc so only the magic is at fault
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn save_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tsbt");
        let cfg = sample_config();
        let mut params = init_params(&cfg.encoder, 2, 7);
        quantize_to_storage(&mut params);
        save(&path, &cfg, &params).unwrap();
        let back = load(&path).unwrap();
        for e in params.entries() {
            assert_eq!(back.params.get(&e.name).unwrap().data, e.data);
        }
    }
}
