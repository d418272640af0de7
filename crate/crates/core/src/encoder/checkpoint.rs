//! Checkpoint container: a JSON config header plus named f64 tensors in
//! little-endian byte order. Save → load → save is bit-exact.
//!
//! Layout:
//!
//! ```text
//! magic "MEKBCKP1" | header_len: u32 | header JSON | n_tensors: u32
//! per tensor: name_len: u16 | name | len: u64 | len × f64
//! ```
//!
//! The header carries the encoder config and, when the checkpoint
//! includes the item tower, the sorted item id list.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

use super::{EncoderConfig, ItemTower, UserEncoderParams};

const MAGIC: &[u8; 8] = b"MEKBCKP1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    item_ids: Option<Vec<String>>,
}

/// Writes params (and optionally the item tower) with their config.
pub fn save_checkpoint(
    path: &Path,
    cfg: &EncoderConfig,
    params: &UserEncoderParams,
    tower: Option<&ItemTower>,
) -> Result<(), CkptError> {
    let io_err = |e| CkptError::Io { path: path.display().to_string(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let io_err = |e| CkptError::Io { path: path.display().to_string(), source: e };

    let header = Header {
        config: cfg.clone(),
        item_ids: tower.map(|t| t.ids().to_vec()),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization cannot fail");

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;

    let tensors = params.named_tensors();
    let n_tensors = tensors.len() + usize::from(tower.is_some());
    w.write_all(&(n_tensors as u32).to_le_bytes()).map_err(io_err)?;

    let mut write_tensor = |name: &str, data: &[f64]| -> Result<(), CkptError> {
        let io_err = |e| CkptError::Io { path: path.display().to_string(), source: e };
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io_err)?;
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        Ok(())
    };
    for (name, data, _) in &tensors {
        write_tensor(name, data)?;
    }
    if let Some(tower) = tower {
        write_tensor("item_tower.embeddings", tower.embeddings().data())?;
    }
    drop(write_tensor);
    w.flush().map_err(|e| CkptError::Io { path: path.display().to_string(), source: e })
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    path: &Path,
) -> Result<(EncoderConfig, UserEncoderParams, Option<ItemTower>), CkptError> {
    let name = path.display().to_string();
    let io_err = |e| CkptError::Io { path: name.clone(), source: e };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let fmt_err = |msg: String| CkptError::Format { path: name.clone(), msg };

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, &name)?;
    if &magic != MAGIC {
        return Err(fmt_err("bad magic; not a checkpoint file".to_string()));
    }

    let header_len = read_u32(&mut r, &name)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, &name)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| fmt_err(format!("bad header: {e}")))?;
    header.config.validate().map_err(&fmt_err)?;

    let n_tensors = read_u32(&mut r, &name)? as usize;
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u16(&mut r, &name)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &name)?;
        let tensor_name = String::from_utf8(name_bytes)
            .map_err(|_| fmt_err("tensor name is not UTF-8".to_string()))?;
        let len = read_u64(&mut r, &name)? as usize;
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in &mut data {
            read_exact(&mut r, &mut buf, &name)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((tensor_name, data));
    }

    let mut params = UserEncoderParams::zeros(&header.config);
    let mut stored: std::collections::BTreeMap<String, Vec<f64>> = tensors.into_iter().collect();
    for (tensor_name, slot, _) in params.named_tensors_mut() {
        let data = stored
            .remove(&tensor_name)
            .ok_or_else(|| fmt_err(format!("missing tensor {tensor_name:?}")))?;
        if data.len() != slot.len() {
            return Err(fmt_err(format!(
                "tensor {:?} has {} values, expected {}",
                tensor_name,
                data.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&data);
    }

    let tower = match header.item_ids {
        None => None,
        Some(ids) => {
            let data = stored
                .remove("item_tower.embeddings")
                .ok_or_else(|| fmt_err("missing tensor \"item_tower.embeddings\"".to_string()))?;
            if data.len() != ids.len() * header.config.k_dim {
                return Err(fmt_err("item tower shape mismatch".to_string()));
            }
            let m = Matrix::from_vec(ids.len(), header.config.k_dim, data);
            Some(ItemTower::from_parts(ids, m))
        }
    };
    if let Some(extra) = stored.keys().next() {
        return Err(fmt_err(format!("unexpected tensor {extra:?}")));
    }

    Ok((header.config, params, tower))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<(), CkptError> {
    r.read_exact(buf).map_err(|e| CkptError::Io { path: path.to_string(), source: e })
}

fn read_u16(r: &mut impl Read, path: &str) -> Result<u16, CkptError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32, CkptError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64, CkptError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_bit_exact() {
        let cfg = EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ffn: 8,
            k_dim: 3,
            n_max: 5,
            vocab_size: 11,
            seed: 3,
        };
        let params = UserEncoderParams::init(&cfg);
        let tower = ItemTower::init(["i1", "i0", "i2"].map(str::to_string), cfg.k_dim, 8);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &params, Some(&tower)).unwrap();
        let (cfg2, params2, tower2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
        assert_eq!(tower2.as_ref(), Some(&tower));
        save_checkpoint(&p2, &cfg2, &params2, tower2.as_ref()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_without_tower_loads_none() {
        let cfg = EncoderConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ffn: 4,
            k_dim: 2,
            n_max: 3,
            vocab_size: 5,
            seed: 1,
        };
        let params = UserEncoderParams::init(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&path, &cfg, &params, None).unwrap();
        let (_, loaded, tower) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert!(tower.is_none());
    }

    #[test]
    fn truncated_file_is_a_format_or_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"MEKBCKP1\x10\x00\x00\x00oops").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
