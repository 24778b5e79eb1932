//! Versioned binary checkpoint container for model parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CKBD" | version u32 | config-JSON length u64 | config JSON
//! | manifest-JSON length u64 | manifest JSON | raw f64 tensor data
//! ```
//!
//! The manifest is an array of `{name, rows, cols}` in the parameter
//! registry's fixed order, and the tensor data follows in that same order.
//! Loading rebuilds the parameter struct from the config and verifies every
//! name and shape against the registry, so a checkpoint from a mismatched
//! architecture is rejected rather than silently misread.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"CKBD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Serialize parameters into a writer. Values are stored as f64 regardless
/// of the in-memory scalar type.
pub fn write_to<F: Scalar, W: Write>(params: &ModelParams<F>, w: &mut W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let config_json = serde_json::to_vec(&params.config)?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(&config_json)?;

    let tensors = params.tensors();
    let manifest: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, m)| TensorEntry { name: name.clone(), rows: m.rows, cols: m.cols })
        .collect();
    let manifest_json = serde_json::to_vec(&manifest)?;
    w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_json)?;

    for (_, m) in &tensors {
        for &v in &m.data {
            w.write_all(&v.into_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Guard against absurd length prefixes before allocating.
const MAX_SECTION: u64 = 1 << 30;

fn read_section<R: Read>(r: &mut R, what: &str) -> Result<Vec<u8>> {
    let len = read_exact_u64(r)?;
    if len > MAX_SECTION {
        return Err(Error::Format(format!("{what} section of {len} bytes is not plausible")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Deserialize parameters from a reader, verifying magic, version, and the
/// complete name/shape manifest against the architecture in the header.
pub fn read_from<F: Scalar, R: Read>(r: &mut R) -> Result<ModelParams<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}; expected {:02x?}",
            magic, MAGIC
        )));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}; this build reads {VERSION}"
        )));
    }

    let config: ModelConfig = serde_json::from_slice(&read_section(r, "config")?)?;
    let manifest: Vec<TensorEntry> = serde_json::from_slice(&read_section(r, "manifest")?)?;

    let mut params: ModelParams<F> = ModelParams::zeros(&config)?;
    {
        let mut tensors = params.tensors_mut();
        if tensors.len() != manifest.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors; architecture has {}",
                manifest.len(),
                tensors.len()
            )));
        }
        let mut buf = Vec::new();
        for (entry, (name, m)) in manifest.iter().zip(tensors.iter_mut()) {
            if entry.name != *name || entry.rows != m.rows || entry.cols != m.cols {
                return Err(Error::Format(format!(
                    "tensor mismatch: file has {} ({}×{}), architecture expects {} ({}×{})",
                    entry.name, entry.rows, entry.cols, name, m.rows, m.cols
                )));
            }
            buf.resize(m.data.len() * 8, 0);
            r.read_exact(&mut buf)?;
            for (v, chunk) in m.data.iter_mut().zip(buf.chunks_exact(8)) {
                *v = F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok(params)
}

/// Write a checkpoint file.
pub fn save<F: Scalar>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(params, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<F>> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::RatioTag;

    fn small_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            vocab: 3,
            classes: 2,
            embed_dim: 4,
            mlp_factor: 2,
            mix_layers: 1,
            ratio: RatioTag::X2,
            side: 4,
        }
    }

    fn roundtrip(params: &ModelParams<f64>) -> ModelParams<f64> {
        let mut buf = Vec::new();
        write_to(params, &mut buf).unwrap();
        read_from::<f64, _>(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut params = ModelParams::<f64>::init(&small_config(), 42).unwrap();
        params.randomize_all(7, 0.3);
        let back = roundtrip(&params);
        assert_eq!(back.config, params.config);
        for ((na, a), (nb, b)) in params.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data, b.data, "tensor {na} changed across the round trip");
        }
    }

    #[test]
    fn file_roundtrip_and_size() {
        let params = ModelParams::<f64>::init(&small_config(), 1).unwrap();
        let dir = std::env::temp_dir().join("ckpt_test_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckbd");
        save(&params, &path).unwrap();
        let back: ModelParams<f64> = load(&path).unwrap();
        assert_eq!(back, params);
        let n_values: usize = params.tensors().iter().map(|(_, m)| m.data.len()).sum();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert!(size > n_values * 8, "tensor payload must dominate the file");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let params = ModelParams::<f64>::init(&small_config(), 3).unwrap();
        let mut buf = Vec::new();
        write_to(&params, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        let err = read_from::<f64, _>(&mut bad_magic.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "magic: {err}");

        let mut bad_version = buf.clone();
        bad_version[4] = 99;
        let err = read_from::<f64, _>(&mut bad_version.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"), "version: {err}");

        let mut truncated = buf.clone();
        truncated.truncate(buf.len() - 9);
        assert!(read_from::<f64, _>(&mut truncated.as_slice()).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        let err = read_from::<f64, _>(&mut trailing.as_slice()).unwrap_err();
        assert!(err.to_string().contains("trailing"), "trailing: {err}");
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let params = ModelParams::<f64>::init(&small_config(), 3).unwrap();
        let mut buf = Vec::new();
        write_to(&params, &mut buf).unwrap();
        // Swap the architecture header for a wider model: every tensor shape
        // check must fail even though the JSON itself is valid.
        let mut wide = small_config();
        wide.dim = 16;
        let cfg_json = serde_json::to_vec(&wide).unwrap();
        let old_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let mut forged = Vec::new();
        forged.extend_from_slice(&buf[..8]);
        forged.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&cfg_json);
        forged.extend_from_slice(&buf[16 + old_len..]);
        let err = read_from::<f64, _>(&mut forged.as_slice()).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "got: {err}");
    }
}
