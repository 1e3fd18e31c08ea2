//! Checkpoint file: a small binary container with the config hash, the
//! ablation flags, and named parameter blocks as little-endian f32.
//!
//! Layout:
//! ```text
//! magic    8  b"FGWT0001"
//! hash    32  sha-256 of the producing model config
//! flags    1  ablation switches
//! pad      7  zero
//! count    4  u32 LE, number of parameter blocks
//! blocks      sorted by name:
//!   name_len 2   u16 LE
//!   name         utf-8
//!   rows     4   u32 LE
//!   cols     4   u32 LE
//!   data         rows*cols f32 LE, row-major
//! ```

use ndarray::Array2;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attn::Ablation;
use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::params::{param_specs, Params};

const MAGIC: &[u8; 8] = b"FGWT0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub config_hash: [u8; 32],
    pub ablation: Ablation,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    ablation: Ablation,
    params: &Params,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&cfg.content_hash());
    buf.push(ablation.flags_byte());
    buf.extend_from_slice(&[0u8; 7]);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.iter() {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for v in m.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(ModelError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Params)> {
    let data = fs::read(path)?;
    let mut r = Reader { data: &data, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(r.take(32)?);
    let flags = r.take(1)?[0];
    r.take(7)?;
    let ablation = Ablation::from_flags_byte(flags)?;
    let count = r.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Checkpoint("non-utf8 parameter name".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let mut m = Array2::zeros((rows, cols));
        for (i, v) in m.iter_mut().enumerate() {
            let b: [u8; 4] = raw[i * 4..i * 4 + 4].try_into().unwrap();
            *v = f32::from_le_bytes(b) as f64;
        }
        if map.insert(name.clone(), m).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate block {name}")));
        }
    }
    if r.at != data.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok((CheckpointHeader { config_hash: hash, ablation }, Params::from_map(map)))
}

/// Load a checkpoint and verify it was produced under `cfg`: the hash must
/// match and every expected parameter must be present with its shape.
pub fn load_checkpoint_for(
    path: &Path,
    cfg: &ModelConfig,
) -> Result<(CheckpointHeader, Params)> {
    let (header, params) = load_checkpoint(path)?;
    if header.config_hash != cfg.content_hash() {
        return Err(ModelError::ConfigMismatch("checkpoint".into()));
    }
    for spec in param_specs(cfg) {
        match params.try_get(&spec.name) {
            None => {
                return Err(ModelError::Checkpoint(format!(
                    "missing parameter {}",
                    spec.name
                )))
            }
            Some(m) if m.dim() != (spec.rows, spec.cols) => {
                return Err(ModelError::shape(
                    spec.name.clone(),
                    format!("({}, {})", spec.rows, spec.cols),
                    format!("{:?}", m.dim()),
                ));
            }
            _ => {}
        }
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::MaskVariant;
    use crate::params::init_params;

    #[test]
    fn round_trip_preserves_f32_values_and_header() {
        let dir = std::env::temp_dir().join(format!("fg-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ckpt");
        let cfg = ModelConfig::default();
        let params = init_params(&cfg);
        let abl = Ablation {
            cache_audio: false,
            variant: MaskVariant::UniAtt,
            train_noise: true,
            adaln: true,
        };
        save_checkpoint(&path, &cfg, abl, &params).unwrap();
        let (header, loaded) = load_checkpoint_for(&path, &cfg).unwrap();
        assert_eq!(header.ablation, abl);
        assert_eq!(header.config_hash, cfg.content_hash());
        for (name, m) in params.iter() {
            let l = loaded.get(name);
            for (a, b) in m.iter().zip(l.iter()) {
                assert_eq!(*a as f32, *b as f32, "{name}");
            }
        }
        fs::remove_file(&path).ok();
    }

    #[test]
    fn wrong_config_is_rejected() {
        let dir = std::env::temp_dir().join(format!("fg-ckpt2-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ckpt");
        let cfg = ModelConfig::default();
        save_checkpoint(&path, &cfg, Ablation::default(), &init_params(&cfg)).unwrap();
        let other = ModelConfig {
            seed: 99,
            ..ModelConfig::default()
        };
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(ModelError::ConfigMismatch(_))
        ));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = std::env::temp_dir().join(format!("fg-ckpt3-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::remove_file(&path).ok();
    }

    #[test]
    fn identical_params_give_identical_bytes() {
        let dir = std::env::temp_dir().join(format!("fg-ckpt4-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cfg = ModelConfig::default();
        let a = dir.join("a.ckpt");
        let b = dir.join("b.ckpt");
        save_checkpoint(&a, &cfg, Ablation::default(), &init_params(&cfg)).unwrap();
        save_checkpoint(&b, &cfg, Ablation::default(), &init_params(&cfg)).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        fs::remove_file(&a).ok();
        fs::remove_file(&b).ok();
    }
}
