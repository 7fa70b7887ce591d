//! Checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "MELODYCK"
//! version      u32      1
//! config_len   u32
//! config       config_len bytes, UTF-8 JSON of TrainConfig
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   data       prod(dims) x f64
//! ```

use std::collections::HashMap;

use super::params::ModelParams;
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MELODYCK";
pub const VERSION: u32 = 1;

fn shapes(params: &ModelParams) -> HashMap<&'static str, Vec<usize>> {
    let a = params.arch;
    let (c, kh, kw) = (a.channels, a.kernel_h, a.kernel_w);
    HashMap::from([
        ("conv1.weight", vec![c, 1, kh, kw]),
        ("conv1.bias", vec![c]),
        ("bn1.gamma", vec![c]),
        ("bn1.beta", vec![c]),
        ("bn1.running_mean", vec![c]),
        ("bn1.running_var", vec![c]),
        ("conv2.weight", vec![c, c, kh, kw]),
        ("conv2.bias", vec![c]),
        ("bn2.gamma", vec![c]),
        ("bn2.beta", vec![c]),
        ("bn2.running_mean", vec![c]),
        ("bn2.running_var", vec![c]),
        ("head.weight", vec![1, c, 1, 1]),
        ("head.bias", vec![1]),
    ])
}

pub fn encode(params: &ModelParams, config: &TrainConfig) -> Result<Vec<u8>> {
    if params.arch != config.arch {
        return Err(Error::arg("parameters and configuration disagree on the architecture"));
    }
    let shapes = shapes(params);
    let cfg = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors: Vec<(&str, &[f64])> = params
        .learnable()
        .into_iter()
        .chain(params.running_stats())
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in tensors {
        let dims = &shapes[name];
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, TrainConfig)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = c.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(c.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("configuration: {e}")))?;
    config.arch.validate()?;
    let mut params = ModelParams::zero_init(config.arch);
    let shapes = shapes(&params);

    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    let count = c.u32()?;
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u64()? as usize);
        }
        let expected = shapes
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if &dims != expected {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {dims:?}, expected {expected:?}")));
        }
        let len: usize = dims.iter().product();
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        found.insert(name, data);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut fill = |name: &str, dst: &mut [f64]| -> Result<()> {
        let src = found
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        dst.copy_from_slice(&src);
        Ok(())
    };
    for (name, dst) in params.learnable_mut() {
        fill(name, dst)?;
    }
    for (name, dst) in params.running_stats_mut() {
        fill(name, dst)?;
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::super::params::Architecture;
    use super::*;
    use rand::SeedableRng;

    fn sample() -> (ModelParams, TrainConfig) {
        let arch = Architecture {
            channels: 3,
            kernel_h: 5,
            kernel_w: 4,
            height: 128,
            width: 64,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut p = ModelParams::init(arch, &mut rng);
        p.bn2.running_var[1] = 2.5;
        let cfg = TrainConfig {
            arch,
            seed: 99,
            ..TrainConfig::default()
        };
        (p, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (p, cfg) = sample();
        let bytes = encode(&p, &cfg).unwrap();
        let (q, cfg2) = decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg, cfg2);
        assert_eq!(encode(&q, &cfg2).unwrap(), bytes);
    }

    #[test]
    fn layout_is_little_endian() {
        let (p, cfg) = sample();
        let bytes = encode(&p, &cfg).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let at = 16 + cfg_len;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 14);
        let name_len = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
        assert_eq!(&bytes[at + 8..at + 8 + name_len], b"conv1.weight");
        let first = at + 8 + name_len + 4 + 4 * 8;
        assert_eq!(
            f64::from_le_bytes(bytes[first..first + 8].try_into().unwrap()),
            p.conv1.weight[[0, 0, 0, 0]]
        );
    }

    #[test]
    fn corrupt_inputs_fail() {
        let (p, cfg) = sample();
        let bytes = encode(&p, &cfg).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
