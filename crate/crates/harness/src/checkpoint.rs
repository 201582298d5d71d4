//! Single-file checkpoint container.
//!
//! Layout (little-endian): magic `WMNETCK1`; `u32` length + UTF-8 config
//! text; `u32` length + JSON metric history; `u32` parameter count; per
//! parameter `u32` name length, name, `u32` rank, `u32` dims, `f32` data.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use wmnet_core::params::ParamStore;
use wmnet_core::tensor::Tensor;

use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"WMNETCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub heat_loss: f64,
    pub size_loss: f64,
    pub offset_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved config, `key=value` text.
    pub config: String,
    pub history: Vec<EpochRecord>,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(config: String, history: Vec<EpochRecord>, store: &ParamStore<f32>) -> Self {
        Self {
            config,
            history,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Copies values into a store built by the same model code; names and
    /// shapes must agree one to one.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            if store.name(id) != name {
                return Err(Error::Format(format!(
                    "parameter mismatch: model has {}, checkpoint has {name}",
                    store.name(id)
                )));
            }
            store.set(id, value.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_bytes(&mut out, self.config.as_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.history)?);
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let config = String::from_utf8(get_bytes(&mut r)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let history = serde_json::from_slice(&get_bytes(&mut r)?)?;
        let n = get_u32(&mut r)?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(get_bytes(&mut r)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)?;
            if rank > 8 {
                return Err(Error::Format(format!("{name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len * 4 > bytes.len() {
                return Err(Error::Format(format!("{name}: truncated data")));
            }
            let mut raw = vec![0u8; len * 4];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((name, Tensor::new(&shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, history, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let n = get_u32(r)?;
    if n > r.get_ref().len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_bitwise() {
        let ck = Checkpoint {
            config: "a=1\n".into(),
            history: vec![EpochRecord {
                epoch: 0,
                lr: 0.01,
                loss: 1.5,
                heat_loss: 1.0,
                size_loss: 0.25,
                offset_loss: 0.25,
            }],
            params: vec![
                ("w".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-8]).unwrap()),
                ("s".into(), Tensor::new(&[], vec![7.0]).unwrap()),
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }
}
