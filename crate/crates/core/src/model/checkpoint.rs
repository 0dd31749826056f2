//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TVIT" | u32 version | u32 len | config JSON (len bytes) | u32 count
//! count x { u32 name_len | name | u32 ndim | ndim x u64 dim | f32 data }
//! ```

use std::fs;
use std::path::Path;

use super::{ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVIT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.numel() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(params.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (spec, t) in params.specs().iter().zip(params.tensors()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. When `expected` is given, the stored config must
/// equal it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ViTConfig>) -> Result<ModelParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = r.u32()? as usize;
    let config: ViTConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint config is not valid: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::Contract(format!(
                "checkpoint config {} does not match requested config {}",
                serde_json::to_string(&config)?,
                serde_json::to_string(want)?
            )));
        }
    }
    let specs = super::param_specs(&config);
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(Error::Format(format!("checkpoint holds {count} tensors, config implies {}", specs.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in &specs {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Format(format!("expected tensor {}, found {name}", spec.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::Format(format!("tensor {name} has shape {shape:?}, expected {:?}", spec.shape)));
        }
        let raw = r.take(spec.numel() * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ViTConfig>) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/model.bin");
        let params = build_model(&ViTConfig::tiny(), 3).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(&ViTConfig::tiny())).unwrap();
        assert_eq!(loaded, params);
        let images = Tensor::from_fn(&[2, 8, 8, 3], |i| (i % 13) as f32 / 13.0);
        let a = params.forward(&images).unwrap();
        let b = loaded.forward(&images).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let params = build_model(&ViTConfig::tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&params);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic, None), Err(Error::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        let err = decode_checkpoint(&bad_version, None).unwrap_err();
        assert!(matches!(err, Error::Format(_)) && err.to_string().contains("version"));

        let err = decode_checkpoint(&bytes[..bytes.len() - 3], None).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(decode_checkpoint(&trailing, None), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_is_explicit() {
        let params = build_model(&ViTConfig::tiny(), 3).unwrap();
        let other = ViTConfig { num_classes: 4, ..ViTConfig::tiny() };
        let err = decode_checkpoint(&encode_checkpoint(&params), Some(&other)).unwrap_err();
        assert!(err.to_string().contains("does not match requested config"), "{err}");
    }
}
