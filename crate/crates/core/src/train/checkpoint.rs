//! `.cbck` checkpoint container.
//!
//! Little-endian: magic `"CBCK"`, version `u8`, `u32` length plus UTF-8 JSON
//! header (network config, training config, progress, RNG derivation),
//! `u32` tensor count and the tensors, a `u8` flag for the optimizer
//! section (`u64` step, `u32` count, tensors named `m:<param>` and
//! `v:<param>`), and a trailing CRC32 of every preceding byte.
//!
//! A tensor is a `u16` name length, the UTF-8 name, `u8` rank, `u32`
//! extents and an `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, ParameterStore};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"CBCK";
pub const VERSION: u8 = 1;

/// Where training stands: `epoch` and the number of batches of it already
/// consumed, plus the global optimizer step count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub progress: Progress,
    pub params: ParameterStore,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngInfo {
    algorithm: String,
    seed: u64,
    stream: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    train: Option<TrainConfig>,
    progress: Progress,
    rng: Option<RngInfo>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(shape.len()).map_err(|_| Error::contract("tensor rank exceeds 255"))?);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::contract("tensor extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let len = self.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32("tensor extent")? as usize;
            count = count
                .checked_mul(d)
                .filter(|&c| c <= self.bytes.len())
                .ok_or_else(|| Error::parse(at, format!("tensor {name} is larger than the file")))?;
            shape.push(d);
        }
        let payload = self.take(4 * count, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::parse(at, format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        network: ck.network.clone(),
        train: ck.train.clone(),
        progress: ck.progress,
        rng: ck.train.as_ref().map(|t| RngInfo {
            algorithm: "chacha8".into(),
            seed: t.seed,
            stream: ck.progress.epoch as u64,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_tensor(&mut out, name, t.shape(), t.data())?;
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            out.extend_from_slice(&((opt.m.len() + opt.v.len()) as u32).to_le_bytes());
            for (prefix, map) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, data) in map {
                    put_tensor(&mut out, &format!("{prefix}:{name}"), &[data.len()], data)?;
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 9 {
        return Err(Error::parse(bytes.len(), "file too short for a checkpoint"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::parse(
            body_len,
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"CBCK\""));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.u32("header length")? as usize;
    let at = r.pos;
    let header: Header = serde_json::from_slice(r.take(json_len, "header")?)
        .map_err(|e| Error::parse(at, format!("bad header JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.tensor()?;
        params.insert(name, t).map_err(|e| Error::parse(at, e.to_string()))?;
    }
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let mut opt = OptimizerState {
                step: r.u64("optimizer step")?,
                ..Default::default()
            };
            let n = r.u32("optimizer tensor count")?;
            for _ in 0..n {
                let at = r.pos;
                let (name, t) = r.tensor()?;
                let (map, key) = match name.split_once(':') {
                    Some(("m", k)) => (&mut opt.m, k),
                    Some(("v", k)) => (&mut opt.v, k),
                    _ => return Err(Error::parse(at, format!("unexpected optimizer tensor {name}"))),
                };
                map.insert(key.to_string(), t.into_data());
            }
            Some(opt)
        }
        f => return Err(Error::parse(r.pos - 1, format!("bad optimizer flag {f}"))),
    };
    if r.pos != body_len {
        return Err(Error::parse(r.pos, format!("{} trailing bytes", body_len - r.pos)));
    }
    Ok(Checkpoint {
        network: header.network,
        train: header.train,
        progress: header.progress,
        params,
        optimizer,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_params;

    fn sample() -> Checkpoint {
        let network = NetworkConfig {
            resdb_count: 1,
            conv3d_count: 1,
            base_channels: 4,
            resdb_growth: 2,
            cbam_reduction: 2,
            ..Default::default()
        };
        let params = build_params(&network, 3).unwrap();
        let mut opt = OptimizerState {
            step: 5,
            ..Default::default()
        };
        for (n, t) in params.iter() {
            opt.m.insert(n.clone(), vec![0.5; t.numel()]);
            opt.v.insert(n.clone(), vec![0.25; t.numel()]);
        }
        Checkpoint {
            network,
            train: Some(TrainConfig::default()),
            progress: Progress { epoch: 2, batch_in_epoch: 1, step: 5 },
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[20] ^= 1;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
        assert!(decode_checkpoint(b"CBCK").is_err());
    }
}
