//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SENC"  version:u32  count:u32
//! count × { name_len:u32 name:utf8  dtype:u8  rank:u8  extents:u64×rank  payload }
//! meta_len:u32  metadata:json
//! ```
//!
//! `dtype` is 0 for 64-bit and 1 for 32-bit IEEE-754 floats; payloads are
//! row-major. A reader can enumerate every tensor without any config.
//! Encoders are not stored: the metadata carries the seeds that rebuild
//! them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SenConfig;
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::network::Sen;
use crate::nn::Module;
use crate::optim::Moments;
use crate::tensor::Tensor;
use crate::trainer::{head_outputs, TrainState, Trainer};

pub const MAGIC: &[u8; 4] = b"SENC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_digest: String,
    pub encoder_seeds: Vec<u64>,
    pub step: usize,
    pub config: SenConfig,
    pub loss_sum: f64,
    pub loss_count: usize,
}

/// Decoded contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub metadata: Metadata,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(what: &str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} length {n} exceeds u32")))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32("entry count", self.entries.len())?);
        for (name, t) in &self.entries {
            put_u32(&mut out, len_u32("name", name.len())?);
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F64 as u8);
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("{name}: rank too large")))?;
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend(t.le_bytes());
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        put_u32(&mut out, len_u32("metadata", meta.len())?);
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| {
                    let e = r.u64()?;
                    usize::try_from(e).map_err(|_| Error::Format(format!("{name}: extent {e} too large")))
                })
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let data: Vec<f64> = match dtype {
                0 => r
                    .take(numel.checked_mul(8).ok_or_else(|| Error::Format("payload overflows".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                1 => r
                    .take(numel.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                other => return Err(Error::Format(format!("{name}: unknown dtype tag {other}"))),
            };
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            entries.push((name, tensor));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Metadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries, metadata })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Snapshot of a trainer: parameters `sen.*` / `head.*`, moment buffers
/// `opt.m.*` / `opt.v.*`, and metadata.
pub fn snapshot(trainer: &Trainer) -> Checkpoint {
    let mut entries: Vec<(String, Tensor)> = trainer
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, Tensor::new(t.shape(), t.data().to_vec()).expect("parameter shape")))
        .collect();
    let params: BTreeMap<String, Vec<usize>> = entries.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    for (name, st) in trainer.state.optimizer.state() {
        let shape = &params[name];
        entries.push((format!("opt.m.{name}"), Tensor::new(shape, st.m.clone()).expect("moment shape")));
        entries.push((format!("opt.v.{name}"), Tensor::new(shape, st.v.clone()).expect("moment shape")));
    }
    let cfg = trainer.config();
    Checkpoint {
        entries,
        metadata: Metadata {
            config_digest: cfg.digest(),
            encoder_seeds: cfg.encoder_seeds(),
            step: trainer.step(),
            config: cfg.clone(),
            loss_sum: trainer.state.loss_sum,
            loss_count: trainer.state.loss_count,
        },
    }
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    snapshot(trainer).write(path)
}

/// Rebuilds a trainer: verifies the config digest and encoder seeds,
/// rebuilds the frozen encoders, and restores every stored tensor.
pub fn restore(ckpt: &Checkpoint) -> Result<Trainer> {
    let meta = &ckpt.metadata;
    let cfg = &meta.config;
    if cfg.digest() != meta.config_digest {
        return Err(Error::Format(format!(
            "config digest mismatch: stored {}, computed {}",
            meta.config_digest,
            cfg.digest()
        )));
    }
    if cfg.encoder_seeds() != meta.encoder_seeds {
        return Err(Error::Format("encoder seeds do not match the stored config".into()));
    }
    let mut sen = Sen::new(cfg)?;
    let mut head = LinearHead::new(cfg.shared_dim, head_outputs(cfg), cfg.head_seed());
    let mut stored: BTreeMap<&str, &Tensor> = ckpt.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut take = |name: &str, shape: &[usize]| -> Result<&Tensor> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!("{name}: stored shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };

    let mut moments = BTreeMap::new();
    {
        let mut params = sen.named_tensors_mut();
        params.iter_mut().for_each(|(n, _)| *n = format!("sen.{n}"));
        let mut h = head.named_tensors_mut();
        h.iter_mut().for_each(|(n, _)| *n = format!("head.{n}"));
        params.extend(h);
        for (name, t) in params {
            let shape = t.shape().to_vec();
            t.data_mut().copy_from_slice(take(&name, &shape)?.data());
            if meta.step > 0 {
                let m = take(&format!("opt.m.{name}"), &shape)?.data().to_vec();
                let v = take(&format!("opt.v.{name}"), &shape)?.data().to_vec();
                moments.insert(name, Moments { m, v });
            }
        }
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let mut state = TrainState::new(cfg);
    state.optimizer.restore(meta.step, moments);
    state.loss_sum = meta.loss_sum;
    state.loss_count = meta.loss_count;
    Trainer::from_parts(cfg, sen, head, state)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    restore(&Checkpoint::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut cfg = SenConfig::default();
        cfg.seed = 4;
        Checkpoint {
            entries: vec![
                ("a".into(), Tensor::new(&[2, 3], vec![0.1, -0.0, 3.5, f64::MIN_POSITIVE, 1e300, -7.25]).unwrap()),
                ("s".into(), Tensor::scalar(2.0)),
            ],
            metadata: Metadata {
                config_digest: cfg.digest(),
                encoder_seeds: cfg.encoder_seeds(),
                step: 3,
                config: cfg,
                loss_sum: 0.1 + 0.2,
                loss_count: 2,
            },
        }
    }

    #[test]
    fn encode_decode_is_bitwise() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert!(back.entries[0].1.bitwise_eq(&c.entries[0].1));
        assert_eq!(back.metadata.loss_sum.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"SENC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!((bytes[17], bytes[18]), (0, 2));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(m)) if m.contains("magic")));
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format(_))), "{cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Checkpoint::decode(&version), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn f32_payloads_are_widened() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        put_u32(&mut bytes, VERSION);
        put_u32(&mut bytes, 1);
        put_u32(&mut bytes, 1);
        bytes.push(b'x');
        bytes.extend_from_slice(&[DType::F32 as u8, 1]);
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        let meta = serde_json::to_vec(&sample().metadata).unwrap();
        put_u32(&mut bytes, meta.len() as u32);
        bytes.extend_from_slice(&meta);
        let c = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(c.entries[0].1.data(), &[1.5, -0.25]);
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let mut c = sample();
        c.metadata.config.seed = 5;
        assert!(matches!(restore(&c), Err(Error::Format(m)) if m.contains("digest")));
    }
}
