//! Checkpoint files.
//!
//! Layout: the 7-byte magic `DFCKPT1`, a little-endian `u64` header length,
//! a JSON header `{config, tensors: [{name, shape, offset}]}`, then every
//! parameter as a little-endian `f32` in layout order. Loading validates the
//! header against the layout implied by the config before touching the
//! payload, so a bad file never yields a partial parameter set.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layout, ModelConfig, ParameterSet};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DFCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn header_for(config: &ModelConfig, layout: &Layout) -> CheckpointHeader {
    CheckpointHeader {
        config: config.clone(),
        tensors: layout
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: t.offset,
            })
            .collect(),
    }
}

pub fn encode<S: Scalar>(params: &ParameterSet<S>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_for(params.config(), params.layout()))?;
    let mut out = Vec::with_capacity(7 + 8 + header.len() + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &x in params.as_slice() {
        out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ParameterSet<S>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..7] != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(7)]).into_owned();
        return Err(Error::VersionMismatch {
            expected: "DFCKPT1".into(),
            found,
        });
    }
    let len_bytes: [u8; 8] = bytes
        .get(7..15)
        .ok_or_else(|| Error::Truncated("missing header length".into()))?
        .try_into()
        .expect("eight bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 15usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated("header extends past end of file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[15..header_end])?;
    header.config.validate()?;
    let layout = Layout::for_config(&header.config);
    let expected = header_for(&header.config, &layout);
    if header.tensors != expected.tensors {
        let diff = header
            .tensors
            .iter()
            .zip(&expected.tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("`{}` {:?}@{} vs layout {:?}@{}", a.name, a.shape, a.offset, b.shape, b.offset))
            .unwrap_or_else(|| format!("{} tensors vs {}", header.tensors.len(), expected.tensors.len()));
        return Err(Error::ShapeMismatch(format!("checkpoint header disagrees with config: {diff}")));
    }
    let payload = &bytes[header_end..];
    let needed = 4 * layout.total;
    if payload.len() < needed {
        return Err(Error::Truncated(format!("payload has {} bytes, need {needed}", payload.len())));
    }
    if payload.len() > needed {
        return Err(Error::ShapeMismatch(format!(
            "payload has {} trailing bytes",
            payload.len() - needed
        )));
    }
    let data: Vec<S> = payload
        .chunks_exact(4)
        .map(|c| S::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
        .collect();
    ParameterSet::from_flat(header.config, data)
}

/// Writes atomically through a sibling temporary file.
pub fn save<S: Scalar>(params: &ParameterSet<S>, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParameterSet<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet<f32> {
        let cfg = ModelConfig {
            context_len: 8,
            ..ModelConfig::tiny()
        };
        ParameterSet::init(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let back: ParameterSet<f32> = decode(&encode(&p).unwrap()).unwrap();
        assert_eq!(back.config(), p.config());
        let a: Vec<u32> = p.as_slice().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.as_slice().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_magic_is_a_version_mismatch() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[6] = b'2';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(decode::<f32>(&bytes[..12]), Err(Error::Truncated(_))));
    }

    #[test]
    fn edited_header_shape_is_rejected() {
        let p = sample();
        let mut header = header_for(p.config(), p.layout());
        header.tensors[1].shape = vec![33];
        let json = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend(std::iter::repeat(0u8).take(4 * p.len()));
        assert!(matches!(decode::<f32>(&bytes), Err(Error::ShapeMismatch(_))));
    }
}
