//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"EPANCKPT"
//! version    u32
//! dtype      u8          1 = f32, 2 = f64
//! epoch      u64
//! meta_len   u32, meta   JSON {"model": ModelConfig, "extra": any|null}
//! count      u32
//! count × { name_len u16, name, ndim u8, dims u32 × ndim, values }
//! has_opt    u8
//! [beta1 f64, beta2 f64, eps f64, count × { step u64, m values, v values }]
//! ```
//!
//! Nothing may follow the last record. Identical parameters produce
//! identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamParams, AdamState, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"EPANCKPT";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    extra: Option<serde_json::Value>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub config: ModelConfig,
    pub epoch: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<Adam<T>>,
    /// Caller-defined JSON stored alongside the model (e.g. a training config).
    pub extra: Option<serde_json::Value>,
}

/// Why a byte stream was rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeError {
    Version(u32),
    Corrupt(String),
}

impl DecodeError {
    fn into_error(self, path: &Path) -> Error {
        match self {
            DecodeError::Version(found) => Error::Version {
                path: path.to_path_buf(),
                found,
                expected: FORMAT_VERSION,
            },
            DecodeError::Corrupt(reason) => Error::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn values<T: Real>(&mut self, dtype: u8, count: usize, what: &str) -> Result<Vec<T>, DecodeError> {
        let width = if dtype == 1 { 4 } else { 8 };
        let bytes = count
            .checked_mul(width)
            .ok_or_else(|| DecodeError::Corrupt(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        let vals: Vec<T> = if dtype == 1 {
            raw.chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::Corrupt(format!("{what}: non-finite value")));
        }
        Ok(vals)
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn from_network(network: &Network<T>, epoch: u64, optimizer: Option<&Adam<T>>) -> Self {
        Checkpoint {
            config: network.config().clone(),
            epoch,
            params: network
                .params()
                .iter()
                .map(|p| (p.name.clone(), Tensor::from_parts(p.tensor.shape().to_vec(), p.tensor.data().to_vec())))
                .collect(),
            optimizer: optimizer.cloned(),
            extra: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let meta = serde_json::to_vec(&Meta {
            model: self.config.clone(),
            extra: self.extra.clone(),
        })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > MAX_NDIM {
                return Err(Error::Parameter(format!("parameter {name} cannot be stored")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            t.data().iter().for_each(|v| v.le_bytes(&mut out));
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                if opt.states.len() != self.params.len() {
                    return Err(Error::Contract("optimizer state count differs from parameter count".into()));
                }
                out.push(1);
                for v in [opt.params.beta1, opt.params.beta2, opt.params.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for s in &opt.states {
                    out.extend_from_slice(&s.step_count.to_le_bytes());
                    s.first_moment.iter().for_each(|v| v.le_bytes(&mut out));
                    s.second_moment.iter().for_each(|v| v.le_bytes(&mut out));
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(DecodeError::Corrupt("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(DecodeError::Version(version));
        }
        let dtype = r.u8("dtype")?;
        if dtype != 1 && dtype != 2 {
            return Err(DecodeError::Corrupt(format!("unknown dtype tag {dtype}")));
        }
        let epoch = r.u64("epoch")?;
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| DecodeError::Corrupt(format!("metadata: {e}")))?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| DecodeError::Corrupt(format!("parameter {i}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u8("rank")? as usize;
            if ndim > MAX_NDIM {
                return Err(DecodeError::Corrupt(format!("{name}: rank {ndim} too large")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| DecodeError::Corrupt(format!("{name}: shape overflow")))?;
            let data = r.values::<T>(dtype, numel, &name)?;
            params.push((name, Tensor::from_parts(shape, data)));
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let hp = AdamParams {
                    beta1: r.f64("beta1")?,
                    beta2: r.f64("beta2")?,
                    eps: r.f64("eps")?,
                };
                let mut states = Vec::with_capacity(params.len());
                for (name, t) in &params {
                    let step_count = r.u64("step count")?;
                    let first_moment = r.values::<T>(dtype, t.numel(), name)?;
                    let second_moment = r.values::<T>(dtype, t.numel(), name)?;
                    states.push(AdamState {
                        first_moment,
                        second_moment,
                        step_count,
                    });
                }
                Some(Adam { params: hp, states })
            }
            f => return Err(DecodeError::Corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(DecodeError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config: meta.model,
            epoch,
            params,
            optimizer,
            extra: meta.extra,
        })
    }

    /// Rebuilds the network described by this checkpoint.
    pub fn into_network(self) -> Result<(Network<T>, u64, Option<Adam<T>>)> {
        let mut net = Network::build(&self.config, 0)?;
        net.load_params(self.params)?;
        Ok((net, self.epoch, self.optimizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| e.into_error(path))
    }
}

pub fn save_checkpoint<T: Real>(network: &Network<T>, epoch: u64, optimizer: Option<&Adam<T>>, path: &Path) -> Result<()> {
    Checkpoint::from_network(network, epoch, optimizer).save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, u64, Option<Adam<T>>)> {
    Checkpoint::<T>::load(path)?.into_network()
}
