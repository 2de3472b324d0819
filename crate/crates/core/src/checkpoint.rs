//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MAMMOCKP"
//! version  u32
//! dtype    u8       bytes per element (4 or 8)
//! seed     u64
//! config   u32 length + UTF-8 JSON
//! count    u32
//! per parameter:
//!   name   u32 length + UTF-8
//!   rank   u32
//!   dims   rank × u64
//!   data   product(dims) elements
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MAMMOCKP";
pub const VERSION: u32 = 1;

pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<(String, Tensor<T>)>,
}

pub fn encode<T: Real>(config: &ModelConfig, seed: u64, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&seed.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    put_bytes(&mut out, &json);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = r.take(1)?[0];
    if tag != T::DTYPE.tag() {
        return Err(Error::Checkpoint(format!(
            "stored with {tag}-byte elements, requested {}-byte",
            T::DTYPE.tag()
        )));
    }
    let seed = r.u64()?;
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
    let count = r.u32()? as usize;
    let width = tag as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { config, seed, params })
}

pub fn save<T: Real>(path: &Path, config: &ModelConfig, seed: u64, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(config, seed, store)?)?;
    Ok(())
}

/// Rebuilds the model from its stored configuration and fills in the stored
/// parameters, checking every name and shape against the rebuilt layout.
pub fn restore<T: Real>(ckpt: Checkpoint<T>) -> Result<(Model, ParamStore<T>, u64)> {
    let (model, mut store) = build_model::<T>(&ckpt.config, ckpt.seed)?;
    if ckpt.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, configuration expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, value)) in ids.into_iter().zip(ckpt.params) {
        let expected = &store.get(id).name;
        if *expected != name {
            return Err(Error::Checkpoint(format!("expected parameter {expected}, found {name}")));
        }
        if store.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, configuration expects {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        store.set(id, value)?;
    }
    Ok((model, store, ckpt.seed))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model, ParamStore<T>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    restore(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, Preset};

    fn config() -> ModelConfig {
        ModelConfig::preset(
            Preset::D,
            Dims {
                d_pe: 4,
                d_ie: 4,
                d_hs: 2,
                patch: 8,
                n_heads: 2,
                d_g: None,
                stem_channels: 2,
                image_size: 16,
            },
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = config();
        let (_, mut store) = build_model::<f32>(&cfg, 3).unwrap();
        let id = store.ids().nth(5).unwrap();
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::full(&shape, 0.125)).unwrap();
        let bytes = encode(&cfg, 3, &store).unwrap();
        let (model, back, seed) = restore(decode::<f32>(&bytes).unwrap()).unwrap();
        assert_eq!(seed, 3);
        assert_eq!(model.config, cfg);
        for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&cfg, 3, &back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = config();
        let (_, store) = build_model::<f32>(&cfg, 3).unwrap();
        let mut bytes = encode(&cfg, 3, &store).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode::<f32>(&bytes[..10]).is_err());
    }

    #[test]
    fn wrong_element_width_is_rejected() {
        let cfg = config();
        let (_, store) = build_model::<f32>(&cfg, 3).unwrap();
        let bytes = encode(&cfg, 3, &store).unwrap();
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_against_config_is_rejected() {
        let cfg = config();
        let (_, store) = build_model::<f32>(&cfg, 3).unwrap();
        let mut ckpt = decode::<f32>(&encode(&cfg, 3, &store).unwrap()).unwrap();
        ckpt.params[0].1 = Tensor::zeros(&[1]);
        let err = restore(ckpt).err().unwrap();
        assert!(err.to_string().contains(&store.iter().next().unwrap().1.name), "{err}");
    }
}
